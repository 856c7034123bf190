#pragma once

#include <cstdint>
#include <vector>

#include "erfattack/detector.hpp"
#include "erfattack/synth.hpp"

namespace erfattack {

struct TrainRecipe {
  std::size_t epochs = 8;
  double learning_rate = 0.02;
  double momentum = 0.9;
  std::size_t batch_size = 16;
  std::size_t negatives_per_positive = 3;
  std::size_t min_negatives = 8;  // per image, so face-free scenes still train
  double min_detection_rate = 0.95;
  double max_false_positives_per_image = 0.2;
  std::uint64_t seed = 17;
};

struct DatasetRecipe {
  std::size_t train_scenes = 600;
  std::size_t heldout_scenes = 200;
  std::size_t image_side = 64;
};

/// Random scenes covering every scale band: empty images, small grids of
/// equal faces, and loose arrangements of mixed sizes.
std::vector<SceneSpec> synthetic_scenes(std::size_t count, std::size_t image_side,
                                        std::uint64_t seed);

/// Per-cell labels for one head: +1 on the cell holding the center of a face
/// in the head's band [s / sqrt 2, s * sqrt 2]; 0 (ignored) on the 3x3 cells
/// around the center of any face within a factor 2 of s; -1 elsewhere,
/// including off-center cells inside larger faces.
Tensor label_map(const DetectorModel& model, const SceneSpec& scene, int scale_index,
                 std::size_t rows, std::size_t cols);

struct DetectionStats {
  std::size_t images = 0;
  std::size_t faces = 0;
  std::size_t matched = 0;
  std::size_t false_positives = 0;

  double detection_rate() const { return faces ? double(matched) / double(faces) : 0.0; }
  double false_positives_per_image() const {
    return images ? double(false_positives) / double(images) : 0.0;
  }
};

/// Detections matched to ground truth one-to-one at IoU >= 0.3.
DetectionStats evaluate_detector(const DetectorModel& model, const std::vector<SceneSpec>& scenes);

inline constexpr double kMatchIou = 0.3;

struct TrainResult {
  DetectionStats heldout;
  std::size_t epochs_run = 0;
};

/// Minibatch SGD with momentum on the per-scale logistic loss, hard negatives
/// kept at `negatives_per_positive` per positive per image. Deterministic for
/// a fixed recipe and scene list. With epochs > 0, throws TrainingFailed
/// when the held-out bar is missed; with zero epochs the model is untouched.
TrainResult train(DetectorModel& model, const std::vector<SceneSpec>& scenes,
                  const std::vector<SceneSpec>& heldout, const TrainRecipe& recipe);

/// The default recipe end to end: synthetic data from `seed`, a fresh model,
/// training and the held-out gate.
struct TrainedDetector {
  DetectorModel model;
  TrainResult result;
};
TrainedDetector train_default(std::uint64_t seed, const TrainRecipe& recipe = {},
                              const DatasetRecipe& data = {});

}  // namespace erfattack
