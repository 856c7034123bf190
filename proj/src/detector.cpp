#include "erfattack/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "erfattack/errors.hpp"

namespace erfattack {

bool Box::contains(double x, double y) const {
  return std::abs(x - cx) <= side / 2 && std::abs(y - cy) <= side / 2;
}

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.side * a.side + b.side * b.side - inter);
}

void DetectorModel::validate() const {
  if (graph.outputs().size() != scales.size()) {
    throw ConfigError("detector has " + std::to_string(graph.outputs().size()) +
                      " heads but " + std::to_string(scales.size()) + " scales");
  }
  for (std::size_t i = 1; i < scales.size(); ++i) {
    if (!(scales[i] > scales[i - 1])) throw ConfigError("anchor scales must strictly increase");
  }
  if (!(score_threshold > 0.0 && score_threshold < 1.0)) {
    throw ConfigError("score threshold must lie in (0, 1)");
  }
  if (!(nms_iou >= 0.0 && nms_iou <= 1.0)) throw ConfigError("NMS IoU must lie in [0, 1]");
  if (stride != (1 << graph.pool_depth(graph.outputs().front()))) {
    throw ConfigError("stride does not match the graph's pooling depth");
  }
}

namespace {

Tensor he_weights(Shape shape, std::mt19937_64& rng, bool zero) {
  Tensor w(shape);
  if (zero) return w;
  const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (double& v : w.data()) v = dist(rng);
  return w;
}

DetectorModel build(std::uint64_t seed, bool zero) {
  std::mt19937_64 rng(seed);
  DetectorModel model;
  Graph g(1);
  int n = -1;
  auto conv_relu = [&](std::size_t in, std::size_t out) {
    n = g.add_conv(n, he_weights({out, in, 3, 3}, rng, zero));
    n = g.add_bias(n, Tensor({out}));
    n = g.add_relu(n);
  };
  conv_relu(1, 8);
  conv_relu(8, 16);
  n = g.add_maxpool2(n);
  conv_relu(16, 16);
  conv_relu(16, 32);
  n = g.add_maxpool2(n);
  conv_relu(32, 32);
  const int trunk = n;
  for (std::size_t s = 0; s < model.scales.size(); ++s) {
    int h = g.add_conv(trunk, he_weights({1, 32, 1, 1}, rng, zero));
    // Heads start biased toward "no face"; most cells are background.
    h = g.add_bias(h, Tensor({1}, zero ? 0.0 : -2.0));
    g.add_output(h);
  }
  model.graph = std::move(g);
  return model;
}

Tensor scaled_input(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw ConfigError("detector expects a [1, H, W] image, got " + shape_string(image.shape()));
  }
  Tensor x(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) x[i] = image[i] * kPixelScale;
  return x;
}

}  // namespace

DetectorModel make_detector(std::uint64_t seed) { return build(seed, false); }
DetectorModel make_zero_detector() { return build(0, true); }

Activations forward_activations(const DetectorModel& model, const Tensor& image) {
  image.check_finite("image");
  return forward_cached(model.graph, scaled_input(image));
}

std::vector<Tensor> forward_logits(const DetectorModel& model, const Tensor& image) {
  return outputs_of(model.graph, forward_activations(model, image));
}

Tensor input_gradient(const DetectorModel& model, const Activations& acts,
                      std::span<const Tensor> cotangents) {
  Tensor g = backward_to_input(model.graph, acts, cotangents);
  for (double& v : g.data()) v *= kPixelScale;
  return g;
}

double softplus(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

double sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

ScaleLoss scale_loss(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) throw ConfigError("target map shape mismatch");
  ScaleLoss out{0.0, Tensor::zeros_like(logits)};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double y = targets[i];
    if (y == 0.0) continue;
    const double z = -y * logits[i];
    out.loss += softplus(z);
    // d/dlogit log(1 + exp(-y * logit)) = -y * sigmoid(-y * logit)
    out.cotangent[i] = -y * sigmoid(z);
  }
  return out;
}

Box anchor_box(const DetectorModel& model, int scale_index, std::size_t row, std::size_t col) {
  const double s = model.stride;
  return {(static_cast<double>(col) + 0.5) * s, (static_cast<double>(row) + 0.5) * s,
          model.scales.at(scale_index)};
}

std::vector<Proposal> decode(const DetectorModel& model, std::span<const Tensor> logit_maps) {
  if (logit_maps.size() != model.num_scales()) throw ConfigError("one logit map per scale expected");
  std::vector<Proposal> out;
  for (std::size_t s = 0; s < logit_maps.size(); ++s) {
    const Tensor& map = logit_maps[s];
    for (std::size_t r = 0; r < map.dim(1); ++r) {
      for (std::size_t c = 0; c < map.dim(2); ++c) {
        const double logit = map.at(0, r, c);
        const double score = sigmoid(logit);
        if (score > model.score_threshold) {
          out.push_back({static_cast<int>(s), r, c, anchor_box(model, static_cast<int>(s), r, c),
                         logit, score});
        }
      }
    }
  }
  return out;
}

std::vector<std::size_t> nms(std::span<const Proposal> candidates, double iou_threshold) {
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const Proposal& pa = candidates[a];
    const Proposal& pb = candidates[b];
    if (pa.score != pb.score) return pa.score > pb.score;
    return std::tie(pa.scale_index, pa.row, pa.col) < std::tie(pb.scale_index, pb.row, pb.col);
  });
  std::vector<std::size_t> kept;
  std::vector<bool> dropped(candidates.size(), false);
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (dropped[i]) continue;
    const Proposal& best = candidates[order[i]];
    kept.push_back(order[i]);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      if (!dropped[j] && iou(best.box, candidates[order[j]].box) > iou_threshold) dropped[j] = true;
    }
  }
  return kept;
}

int owning_instance(std::span<const Box> instances, double x, double y) {
  int best = -1;
  double best_d2 = 0.0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const Box& b = instances[i];
    if (!b.contains(x, y)) continue;
    const double d2 = (b.cx - x) * (b.cx - x) + (b.cy - y) * (b.cy - y);
    if (best == -1 || d2 < best_d2) {
      best = static_cast<int>(i);
      best_d2 = d2;
    }
  }
  return best;
}

DetectionResult detections_from_logits(const DetectorModel& model,
                                       std::span<const Tensor> logit_maps) {
  DetectionResult result;
  result.proposals = decode(model, logit_maps);
  for (std::size_t idx : nms(result.proposals, model.nms_iou)) {
    const Proposal& p = result.proposals[idx];
    result.detections.push_back({p.box, p.score, p.scale_index, {}});
  }
  const std::vector<Box> boxes = boxes_of(result.detections);
  for (std::size_t i = 0; i < result.proposals.size(); ++i) {
    const Box& a = result.proposals[i].box;
    const int owner = owning_instance(boxes, a.cx, a.cy);
    if (owner >= 0) result.detections[owner].proposal_ids.push_back(i);
  }
  return result;
}

DetectionResult detect(const DetectorModel& model, const Tensor& image) {
  const std::vector<Tensor> maps = forward_logits(model, image);
  return detections_from_logits(model, maps);
}

std::vector<int> match_boxes(std::span<const Box> predicted, std::span<const Box> reference,
                             double min_iou) {
  std::vector<int> match(reference.size(), -1);
  for (std::size_t p = 0; p < predicted.size(); ++p) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t r = 0; r < reference.size(); ++r) {
      if (match[r] != -1) continue;
      const double v = iou(predicted[p], reference[r]);
      if (v >= min_iou && (best == -1 || v > best_iou)) {
        best = static_cast<int>(r);
        best_iou = v;
      }
    }
    if (best != -1) match[best] = static_cast<int>(p);
  }
  return match;
}

std::vector<Box> boxes_of(std::span<const Detection> detections) {
  std::vector<Box> boxes;
  boxes.reserve(detections.size());
  for (const Detection& d : detections) boxes.push_back(d.box);
  return boxes;
}

}  // namespace erfattack
