#include "erfattack/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "erfattack/errors.hpp"
#include "erfattack/parallel.hpp"

namespace erfattack {
namespace {

constexpr int kMinTrainSide = 9;
constexpr int kMaxTrainSide = 60;

bool overlaps(const FacePlacement& a, const FacePlacement& b) {
  const double ax0 = a.cx - a.side / 2.0, bx0 = b.cx - b.side / 2.0;
  const double ay0 = a.cy - a.side / 2.0, by0 = b.cy - b.side / 2.0;
  return ax0 < bx0 + b.side && bx0 < ax0 + a.side && ay0 < by0 + b.side && by0 < ay0 + a.side;
}

FacePlacement place(int left, int top, int side) {
  return {left + side / 2.0, top + side / 2.0, side};
}

int log_uniform_side(std::mt19937_64& rng, int lo, int hi) {
  const double t = std::log(lo) + uniform01(rng) * (std::log(hi + 1.0) - std::log(lo));
  return std::clamp(static_cast<int>(std::exp(t)), lo, hi);
}

SceneSpec random_scene(std::uint64_t seed, std::size_t image_side) {
  std::mt19937_64 rng(seed);
  SceneSpec scene{image_side, image_side, derive_seed(seed, 1000), {}};
  const int n = static_cast<int>(image_side);
  const int max_side = std::min(kMaxTrainSide, n - 4);
  const double kind = uniform01(rng);
  if (kind < 0.15) return scene;
  if (kind < 0.45) {
    // Grid of equal faces, the layout of the interference benchmark.
    const int side = log_uniform_side(rng, kMinTrainSide, std::min(33, max_side));
    const int cols = uniform_int(rng, 1, 3), rows = uniform_int(rng, 1, 3);
    int spacing = static_cast<int>(std::lround(side * (1.1 + 0.9 * uniform01(rng))));
    auto extent = [&](int k) { return (k - 1) * spacing + side; };
    while (spacing > side && (extent(cols) > n || extent(rows) > n)) --spacing;
    if (extent(cols) > n || extent(rows) > n) return scene;
    const int x0 = uniform_int(rng, 0, n - extent(cols));
    const int y0 = uniform_int(rng, 0, n - extent(rows));
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) scene.faces.push_back(place(x0 + c * spacing, y0 + r * spacing, side));
    }
    return scene;
  }
  const int count = uniform_int(rng, 1, 3);
  for (int attempt = 0; attempt < 60 && static_cast<int>(scene.faces.size()) < count; ++attempt) {
    const int side = log_uniform_side(rng, kMinTrainSide, max_side);
    const FacePlacement f = place(uniform_int(rng, 0, n - side), uniform_int(rng, 0, n - side), side);
    if (std::none_of(scene.faces.begin(), scene.faces.end(),
                     [&](const FacePlacement& g) { return overlaps(f, g); })) {
      scene.faces.push_back(f);
    }
  }
  return scene;
}

struct SampleGradient {
  double loss = 0.0;
  std::vector<Tensor> weights;
};

SampleGradient sample_gradient(const DetectorModel& model, const SceneSpec& scene,
                               const TrainRecipe& recipe) {
  const Tensor image = render_scene(scene);
  const Activations acts = forward_activations(model, image);
  const std::vector<Tensor> logits = outputs_of(model.graph, acts);

  std::vector<Tensor> targets;
  std::size_t positives = 0;
  struct Negative {
    double loss;
    std::size_t head, index;
  };
  std::vector<Negative> negatives;
  for (std::size_t s = 0; s < logits.size(); ++s) {
    Tensor t = label_map(model, scene, static_cast<int>(s), logits[s].dim(1), logits[s].dim(2));
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i] > 0) ++positives;
      if (t[i] < 0) {
        negatives.push_back({softplus(logits[s][i]), s, i});
        t[i] = 0.0;
      }
    }
    targets.push_back(std::move(t));
  }
  // Hard negatives: highest loss first, ties by position.
  const std::size_t keep = std::min(
      negatives.size(), std::max(recipe.min_negatives, recipe.negatives_per_positive * positives));
  std::stable_sort(negatives.begin(), negatives.end(),
                   [](const Negative& a, const Negative& b) { return a.loss > b.loss; });
  for (std::size_t k = 0; k < keep; ++k) targets[negatives[k].head][negatives[k].index] = -1.0;

  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, positives + keep));
  SampleGradient out;
  std::vector<Tensor> cotangents;
  for (std::size_t s = 0; s < logits.size(); ++s) {
    ScaleLoss l = scale_loss(logits[s], targets[s]);
    out.loss += l.loss * norm;
    for (double& v : l.cotangent.data()) v *= norm;
    cotangents.push_back(std::move(l.cotangent));
  }
  out.weights = backward(model.graph, acts, cotangents).weights;
  return out;
}

}  // namespace

std::vector<SceneSpec> synthetic_scenes(std::size_t count, std::size_t image_side,
                                        std::uint64_t seed) {
  std::vector<SceneSpec> scenes;
  scenes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) scenes.push_back(random_scene(derive_seed(seed, i), image_side));
  return scenes;
}

Tensor label_map(const DetectorModel& model, const SceneSpec& scene, int scale_index,
                 std::size_t rows, std::size_t cols) {
  Tensor t({1, rows, cols}, -1.0);
  const double scale = model.scales.at(scale_index);
  const double lo = scale / std::sqrt(2.0), hi = scale * std::sqrt(2.0);
  const double stride = model.stride;
  const auto clamp_index = [](long v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(v, 0L, static_cast<long>(n) - 1));
  };
  for (const FacePlacement& f : scene.faces) {
    if (f.side < scale / 2 || f.side > scale * 2) continue;
    const long r = static_cast<long>(std::floor(f.cy / stride));
    const long c = static_cast<long>(std::floor(f.cx / stride));
    for (std::size_t y = clamp_index(r - 1, rows); y <= clamp_index(r + 1, rows); ++y) {
      for (std::size_t x = clamp_index(c - 1, cols); x <= clamp_index(c + 1, cols); ++x) {
        if (t.at(0, y, x) < 0) t.at(0, y, x) = 0.0;
      }
    }
    if (f.side >= lo && f.side <= hi && r >= 0 && c >= 0 && r < static_cast<long>(rows) &&
        c < static_cast<long>(cols)) {
      t.at(0, r, c) = 1.0;
    }
  }
  return t;
}

DetectionStats evaluate_detector(const DetectorModel& model, const std::vector<SceneSpec>& scenes) {
  std::vector<DetectionStats> per(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    const SceneSpec& scene = scenes[i];
    const DetectionResult r = detect(model, render_scene(scene));
    std::vector<Box> truth;
    for (const FacePlacement& f : scene.faces) truth.push_back({f.cx, f.cy, double(f.side)});
    const std::vector<int> match = match_boxes(boxes_of(r.detections), truth, kMatchIou);
    const auto matched = static_cast<std::size_t>(std::count_if(match.begin(), match.end(), [](int m) { return m >= 0; }));
    per[i] = {1, truth.size(), matched, r.detections.size() - matched};
  });
  DetectionStats total;
  for (const DetectionStats& s : per) {
    total.images += s.images;
    total.faces += s.faces;
    total.matched += s.matched;
    total.false_positives += s.false_positives;
  }
  return total;
}

TrainResult train(DetectorModel& model, const std::vector<SceneSpec>& scenes,
                  const std::vector<SceneSpec>& heldout, const TrainRecipe& recipe) {
  model.validate();
  TrainResult result;
  if (recipe.epochs == 0) return result;
  if (scenes.empty()) throw ConfigError("no training scenes");
  if (recipe.batch_size == 0) throw ConfigError("batch size must be positive");

  std::vector<bool> band_seen(model.num_scales(), false);
  for (const SceneSpec& s : scenes) {
    for (const FacePlacement& f : s.faces) {
      for (std::size_t k = 0; k < model.num_scales(); ++k) {
        const double sc = model.scales[k];
        if (f.side >= sc / std::sqrt(2.0) && f.side <= sc * std::sqrt(2.0)) band_seen[k] = true;
      }
    }
  }
  if (std::find(band_seen.begin(), band_seen.end(), false) != band_seen.end()) {
    throw ConfigError("training scenes must cover every scale band");
  }

  std::vector<Tensor> velocity(model.graph.nodes().size());
  for (std::size_t i = 0; i < velocity.size(); ++i) {
    if (!model.graph.nodes()[i].weights.empty()) velocity[i] = Tensor::zeros_like(model.graph.nodes()[i].weights);
  }
  std::mt19937_64 rng(recipe.seed);
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < recipe.epochs; ++epoch) {
    // Fisher-Yates with the raw engine, portable across standard libraries.
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    for (std::size_t start = 0; start < order.size(); start += recipe.batch_size) {
      const std::size_t n = std::min(recipe.batch_size, order.size() - start);
      std::vector<SampleGradient> grads(n);
      parallel_for(n, [&](std::size_t k) {
        grads[k] = sample_gradient(model, scenes[order[start + k]], recipe);
      });
      const double inv = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < velocity.size(); ++i) {
        if (velocity[i].empty()) continue;
        for (double& v : velocity[i].data()) v *= recipe.momentum;
        for (const SampleGradient& g : grads) axpy(velocity[i], inv, g.weights[i]);
      }
      sgd_step(model.graph, velocity, recipe.learning_rate);
    }
    ++result.epochs_run;
  }
  for (const Node& node : model.graph.nodes()) node.weights.check_finite("trained weights");

  result.heldout = evaluate_detector(model, heldout);
  if (result.heldout.detection_rate() < recipe.min_detection_rate ||
      result.heldout.false_positives_per_image() > recipe.max_false_positives_per_image) {
    throw TrainingFailed(result.heldout.detection_rate(),
                         result.heldout.false_positives_per_image());
  }
  return result;
}

TrainedDetector train_default(std::uint64_t seed, const TrainRecipe& recipe,
                              const DatasetRecipe& data) {
  TrainRecipe r = recipe;
  r.seed = seed;
  TrainedDetector out{make_detector(derive_seed(seed, 1)), {}};
  const auto scenes = synthetic_scenes(data.train_scenes, data.image_side, derive_seed(seed, 2));
  const auto heldout = synthetic_scenes(data.heldout_scenes, data.image_side, derive_seed(seed, 3));
  out.result = train(out.model, scenes, heldout, r);
  return out;
}

}  // namespace erfattack
