#include "erfattack/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "erfattack/errors.hpp"

namespace erfattack {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw ConfigError("tensor dimensions must be positive: " + shape_string(shape_));
  }
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw ConfigError("tensor dimensions must be positive: " + shape_string(shape_));
  }
  if (shape_size(shape_) != data_.size()) {
    throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                      " does not match shape " + shape_string(shape_));
  }
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

void Tensor::check_finite(const char* what) const {
  for (double v : data_) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
  }
}

void axpy(Tensor& a, double scale, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("axpy shape mismatch " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
  }
  double* pa = a.raw();
  const double* pb = b.raw();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += scale * pb[i];
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ConfigError("dot shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double sum(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.data()) acc += v;
  return acc;
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace erfattack
