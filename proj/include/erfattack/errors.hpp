#pragma once

#include <stdexcept>
#include <string>

namespace erfattack {

/// Invalid shapes, arguments or configuration values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A value became NaN or infinite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingFailed : public std::runtime_error {
 public:
  TrainingFailed(double detection_rate, double false_positives_per_image)
      : std::runtime_error("training did not reach the detection bar: rate=" +
                           std::to_string(detection_rate) +
                           " fp/image=" + std::to_string(false_positives_per_image)),
        detection_rate_(detection_rate),
        false_positives_per_image_(false_positives_per_image) {}

  double detection_rate() const noexcept { return detection_rate_; }
  double false_positives_per_image() const noexcept { return false_positives_per_image_; }

 private:
  double detection_rate_;
  double false_positives_per_image_;
};

/// An ERF estimate with no usable energy (e.g. an all-zero gradient field).
class DegenerateProfile : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace erfattack
