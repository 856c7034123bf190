#include "erfattack/attacks.hpp"

#include <algorithm>
#include <cmath>

#include "erfattack/errors.hpp"

namespace erfattack {
namespace {

constexpr double kStallNorm = 1e-12;

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void signed_step(PerturbationState& state, const Tensor& direction, const AttackConfig& cfg) {
  if (direction.shape() != state.xi.shape()) throw ConfigError("gradient/perturbation shape mismatch");
  for (std::size_t i = 0; i < state.xi.size(); ++i) {
    state.xi[i] = std::clamp(state.xi[i] - cfg.alpha * sign(direction[i]), -cfg.epsilon, cfg.epsilon);
  }
}

std::vector<std::size_t> all_active(const ActiveTargets& targets) {
  std::vector<std::size_t> ids;
  for (const auto& set : targets.per_instance) ids.insert(ids.end(), set.begin(), set.end());
  std::sort(ids.begin(), ids.end());
  return ids;
}

// X^adv: the perturbed image kept in the valid pixel range. The loop sees the
// same image that is finally scored.
Tensor perturbed(const Tensor& image, const Tensor& xi) {
  Tensor out = image;
  axpy(out, 1.0, xi);
  for (double& v : out.data()) v = std::clamp(v, 0.0, 255.0);
  return out;
}

}  // namespace

const char* method_name(Method method) {
  switch (method) {
    case Method::ImpIfgsm: return "imp-ifgsm";
    case Method::ImpDeepfool: return "imp-deepfool";
    case Method::Lp: return "lp";
    case Method::LipA: return "lip-a";
    case Method::LipH: return "lip-h";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::ImpIfgsm, Method::ImpDeepfool, Method::Lp, Method::LipA, Method::LipH}) {
    if (name == method_name(m)) return m;
  }
  throw ConfigError("unknown attack method '" + name +
                    "' (expected imp-ifgsm, imp-deepfool, lp, lip-a or lip-h)");
}

bool uses_masks(Method method) {
  return method == Method::Lp || method == Method::LipA || method == Method::LipH;
}

void AttackConfig::validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be positive");
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be non-negative");
  if (max_iters == 0) throw ConfigError("max_iters must be at least 1");
  if (target_label != -1.0) throw ConfigError("target_label is fixed at -1");
}

CropMask make_crop_mask(const Shape& image_shape, const Box& box, std::size_t side, int instance) {
  if (side % 2 == 0) throw ConfigError("crop side must be odd");
  const long h = static_cast<long>(image_shape.at(1)), w = static_cast<long>(image_shape.at(2));
  const long cx = static_cast<long>(std::floor(box.cx)), cy = static_cast<long>(std::floor(box.cy));
  const long half = static_cast<long>(side / 2);
  CropMask m;
  m.mask = Tensor(image_shape);
  m.instance = instance;
  m.x0 = static_cast<std::size_t>(std::clamp(cx - half, 0L, w));
  m.x1 = static_cast<std::size_t>(std::clamp(cx + half + 1, 0L, w));
  m.y0 = static_cast<std::size_t>(std::clamp(cy - half, 0L, h));
  m.y1 = static_cast<std::size_t>(std::clamp(cy + half + 1, 0L, h));
  for (std::size_t y = m.y0; y < m.y1; ++y) {
    for (std::size_t x = m.x0; x < m.x1; ++x) m.mask.at(0, y, x) = 1.0;
  }
  return m;
}

CropMask full_mask(const Shape& image_shape, int instance) {
  return {Tensor(image_shape, 1.0), instance, 0, 0, image_shape.at(2), image_shape.at(1)};
}

Tensor crop_apply(const CropMask& mask, const Tensor& gradient) {
  if (mask.mask.shape() != gradient.shape()) throw ConfigError("mask/gradient shape mismatch");
  Tensor out = Tensor::zeros_like(gradient);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask.mask[i] != 0.0) out[i] = mask.mask[i] * gradient[i];
  }
  return out;
}

std::size_t ActiveTargets::active_instances() const {
  return static_cast<std::size_t>(std::count_if(per_instance.begin(), per_instance.end(),
                                                [](const auto& s) { return !s.empty(); }));
}

std::size_t ActiveTargets::target_count() const {
  std::size_t n = 0;
  for (const auto& s : per_instance) n += s.size();
  return n;
}

ActiveTargets active_targets(const DetectorModel& model, const Tensor& perturbed_image,
                             std::span<const Box> original_detections) {
  ActiveTargets t;
  t.acts = forward_activations(model, perturbed_image);
  t.logits = outputs_of(model.graph, t.acts);
  t.proposals = decode(model, t.logits);
  t.per_instance.resize(original_detections.size());
  for (std::size_t i = 0; i < t.proposals.size(); ++i) {
    const Box& a = t.proposals[i].box;
    const int owner = owning_instance(original_detections, a.cx, a.cy);
    if (owner >= 0) t.per_instance[owner].push_back(i);
  }
  return t;
}

std::vector<Tensor> target_cotangents(const ActiveTargets& targets,
                                      std::span<const std::size_t> proposal_ids, bool unit_weight) {
  std::vector<Tensor> cot(targets.logits.size());
  for (std::size_t id : proposal_ids) {
    const Proposal& p = targets.proposals.at(id);
    Tensor& c = cot[p.scale_index];
    if (c.empty()) c = Tensor::zeros_like(targets.logits[p.scale_index]);
    // d softplus(-y * logit) / d logit with y = -1.
    c.at(0, p.row, p.col) = unit_weight ? 1.0 : sigmoid(p.logit);
  }
  return cot;
}

std::size_t highest_loss_target(const ActiveTargets& targets, std::span<const std::size_t> ids) {
  if (ids.empty()) throw ConfigError("no targets to choose from");
  // The targeted loss is increasing in the logit.
  std::size_t best = ids.front();
  for (std::size_t id : ids) {
    if (targets.proposals[id].logit > targets.proposals[best].logit) best = id;
  }
  return best;
}

void imp_ifgsm_step(PerturbationState& state, const Tensor& gradient, const AttackConfig& cfg) {
  signed_step(state, gradient, cfg);
}

bool imp_deepfool_step(PerturbationState& state, const Tensor& gradient, const AttackConfig& cfg) {
  if (gradient.shape() != state.xi.shape()) throw ConfigError("gradient/perturbation shape mismatch");
  const double norm2 = dot(gradient, gradient);
  if (std::sqrt(norm2) < kStallNorm) return false;
  for (std::size_t i = 0; i < state.xi.size(); ++i) {
    state.xi[i] = std::clamp(state.xi[i] - gradient[i] / norm2, -cfg.epsilon, cfg.epsilon);
  }
  return true;
}

void lip_iteration(const DetectorModel& model, const ActiveTargets& targets,
                   std::span<const CropMask> masks, PerturbationState& state,
                   const AttackConfig& cfg) {
  if (masks.size() != targets.per_instance.size()) throw ConfigError("one mask per instance required");
  Tensor total = Tensor::zeros_like(state.xi);
  for (std::size_t i = 0; i < targets.per_instance.size(); ++i) {
    const auto& ids = targets.per_instance[i];
    if (ids.empty()) continue;
    std::vector<Tensor> cot;
    if (cfg.method == Method::LipH) {
      const std::size_t best = highest_loss_target(targets, ids);
      cot = target_cotangents(targets, std::span(&best, 1), false);
    } else {
      cot = target_cotangents(targets, ids, false);
    }
    const Tensor g = input_gradient(model, targets.acts, cot);
    axpy(total, 1.0, crop_apply(masks[i], g));
  }
  signed_step(state, total, cfg);
}

void lp_iteration(const DetectorModel& model, const ActiveTargets& targets,
                  std::span<const CropMask> masks, PerturbationState& state,
                  const AttackConfig& cfg) {
  if (masks.size() != targets.per_instance.size()) throw ConfigError("one mask per instance required");
  const std::vector<std::size_t> ids = all_active(targets);
  if (ids.empty()) return;
  const Tensor g = input_gradient(model, targets.acts, target_cotangents(targets, ids, false));
  CropMask uni{Tensor::zeros_like(state.xi), -1, 0, 0, 0, 0};
  for (const CropMask& m : masks) {
    for (std::size_t k = 0; k < uni.mask.size(); ++k) uni.mask[k] = std::max(uni.mask[k], m.mask[k]);
  }
  signed_step(state, crop_apply(uni, g), cfg);
}

std::size_t AttackResult::removed_count() const {
  return static_cast<std::size_t>(std::count(removed.begin(), removed.end(), true));
}

std::vector<CropMask> profile_masks(const Shape& image_shape, std::span<const Detection> detections,
                                    std::span<const ErfProfile> profiles) {
  std::vector<CropMask> masks;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const int s = detections[i].scale_index;
    const auto it = std::find_if(profiles.begin(), profiles.end(),
                                 [s](const ErfProfile& p) { return p.scale_index == s; });
    if (it == profiles.end()) throw ConfigError("no ERF profile for scale " + std::to_string(s));
    masks.push_back(make_crop_mask(image_shape, detections[i].box, it->crop_side, static_cast<int>(i)));
  }
  return masks;
}

AttackResult run_attack(const DetectorModel& model, const Tensor& image, const AttackConfig& cfg,
                        std::span<const ErfProfile> profiles, const IterationObserver& observer) {
  return run_attack_with_masks(
      model, image, cfg,
      [&](const std::vector<Detection>& dets) {
        return uses_masks(cfg.method) ? profile_masks(image.shape(), dets, profiles)
                                      : std::vector<CropMask>{};
      },
      observer);
}

AttackResult run_attack_with_masks(
    const DetectorModel& model, const Tensor& image, const AttackConfig& cfg,
    const std::function<std::vector<CropMask>(const std::vector<Detection>&)>& make_masks,
    const IterationObserver& observer) {
  cfg.validate();
  AttackResult result;
  result.originals = detect(model, image).detections;
  const std::vector<Box> originals = boxes_of(result.originals);
  PerturbationState state{Tensor::zeros_like(image), 0, std::vector<bool>(originals.size(), true)};
  const std::vector<CropMask> masks = make_masks(result.originals);

  if (!originals.empty()) {
    while (state.iteration < cfg.max_iters) {
      const ActiveTargets targets = active_targets(model, perturbed(image, state.xi), originals);
      for (std::size_t i = 0; i < originals.size(); ++i) state.active[i] = !targets.per_instance[i].empty();
      if (targets.target_count() == 0) break;
      result.active_counts.push_back(targets.target_count());
      switch (cfg.method) {
        case Method::ImpIfgsm: {
          const auto ids = all_active(targets);
          imp_ifgsm_step(state, input_gradient(model, targets.acts, target_cotangents(targets, ids, false)), cfg);
          break;
        }
        case Method::ImpDeepfool: {
          const auto ids = all_active(targets);
          if (!imp_deepfool_step(state, input_gradient(model, targets.acts, target_cotangents(targets, ids, true)), cfg)) {
            result.stalled = true;
          }
          break;
        }
        case Method::Lp: lp_iteration(model, targets, masks, state, cfg); break;
        case Method::LipA:
        case Method::LipH: lip_iteration(model, targets, masks, state, cfg); break;
      }
      if (result.stalled) break;
      ++state.iteration;
      if (observer) observer(state);
    }
  }

  result.iterations = state.iteration;
  result.xi = state.xi;
  result.adversarial = perturbed(image, state.xi);
  result.final_detections = detect(model, result.adversarial).detections;
  const std::vector<int> match = match_boxes(boxes_of(result.final_detections), originals, 0.3);
  for (int m : match) result.removed.push_back(m < 0);
  return result;
}

}  // namespace erfattack
