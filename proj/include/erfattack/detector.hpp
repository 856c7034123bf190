#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "erfattack/graph.hpp"

namespace erfattack {

/// Axis-aligned square given by its center and side, in pixel coordinates
/// where pixel (x, y) covers [x, x+1) x [y, y+1).
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double side = 0.0;

  double x0() const { return cx - side / 2; }
  double y0() const { return cy - side / 2; }
  double x1() const { return cx + side / 2; }
  double y1() const { return cy + side / 2; }
  /// Closed containment of a point.
  bool contains(double x, double y) const;

  bool operator==(const Box&) const = default;
};

double iou(const Box& a, const Box& b);

struct Proposal {
  int scale_index = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  Box box;
  double logit = 0.0;
  double score = 0.0;
};

struct Detection {
  Box box;
  double score = 0.0;
  int scale_index = 0;
  std::vector<std::size_t> proposal_ids;  // indices into the proposal list it came from
};

struct DetectionResult {
  std::vector<Proposal> proposals;
  std::vector<Detection> detections;
};

/// Fixed-architecture single-stage detector with one binary head per anchor
/// scale. Images are raw [1, H, W] tensors in [0, 255]; the model divides by
/// 255 before the graph and all gradients it returns are in pixel units.
struct DetectorModel {
  Graph graph{1};
  int stride = 4;
  std::vector<double> scales{12.0, 24.0, 48.0};
  double score_threshold = 0.5;
  double nms_iou = 0.1;

  std::size_t num_scales() const { return scales.size(); }
  /// Throws ConfigError if heads, scales and thresholds disagree.
  void validate() const;
};

inline constexpr double kPixelScale = 1.0 / 255.0;

/// The backbone conv3x3(1->8)/relu, conv3x3(8->16)/relu, maxpool2,
/// conv3x3(16->16)/relu, conv3x3(16->32)/relu, maxpool2, conv3x3(32->32)/relu
/// followed by one 1x1 conv head per scale. He-initialized from `seed`.
DetectorModel make_detector(std::uint64_t seed);
/// Same architecture with every weight zero.
DetectorModel make_zero_detector();

Activations forward_activations(const DetectorModel& model, const Tensor& image);
/// One [1, H/stride, W/stride] logit map per head.
std::vector<Tensor> forward_logits(const DetectorModel& model, const Tensor& image);
/// d/dImage of sum_k <cotangent_k, logits_k>, in pixel units.
Tensor input_gradient(const DetectorModel& model, const Activations& acts,
                      std::span<const Tensor> cotangents);

struct ScaleLoss {
  double loss = 0.0;
  Tensor cotangent;  // dloss/dlogit, zero on ignored cells
};

/// Logistic loss sum over active cells: sum log(1 + exp(-y * logit)).
/// `targets` holds +1, -1, or 0 (ignored) per cell.
ScaleLoss scale_loss(const Tensor& logits, const Tensor& targets);

/// Numerically stable log(1 + exp(v)).
double softplus(double v);
double sigmoid(double v);

/// Image-space anchor of a logit-map cell.
Box anchor_box(const DetectorModel& model, int scale_index, std::size_t row, std::size_t col);

/// One proposal per (scale, cell) scoring above the model's threshold, in
/// (scale, row, col) order.
std::vector<Proposal> decode(const DetectorModel& model, std::span<const Tensor> logit_maps);

/// Greedy NMS: repeatedly keep the best remaining candidate and drop every
/// other with IoU above `iou_threshold`. Ranking is by descending score with
/// ties broken by ascending (scale_index, row, col). Returns kept indices in
/// the order they were kept.
std::vector<std::size_t> nms(std::span<const Proposal> candidates, double iou_threshold);

/// Index of the detection owning a point: the containing box whose center is
/// nearest, ties to the lower index. -1 if no box contains the point.
int owning_instance(std::span<const Box> instances, double x, double y);

/// forward -> decode -> nms; each detection then collects the proposals it owns.
DetectionResult detect(const DetectorModel& model, const Tensor& image);
DetectionResult detections_from_logits(const DetectorModel& model,
                                       std::span<const Tensor> logit_maps);

/// Greedy one-to-one matching. `predicted` is visited in order and each
/// takes the unmatched reference box with the highest IoU >= min_iou (ties to
/// the lower index). Returns, per reference box, the matched predicted index
/// or -1.
std::vector<int> match_boxes(std::span<const Box> predicted, std::span<const Box> reference,
                             double min_iou);

std::vector<Box> boxes_of(std::span<const Detection> detections);

}  // namespace erfattack
