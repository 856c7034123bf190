#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "erfattack/detector.hpp"
#include "erfattack/erf.hpp"

namespace erfattack {

enum class Method { ImpIfgsm, ImpDeepfool, Lp, LipA, LipH };

/// Stable lowercase names: imp-ifgsm, imp-deepfool, lp, lip-a, lip-h.
const char* method_name(Method method);
/// Throws ConfigError on an unknown name.
Method parse_method(const std::string& name);
bool uses_masks(Method method);

struct AttackConfig {
  Method method = Method::LipH;
  double alpha = 1.0;     // pixel units
  double epsilon = 20.0;  // max |xi|, pixel units
  std::size_t max_iters = 40;
  double target_label = -1.0;  // the attack is targeted at "no face"

  /// alpha > 0, epsilon >= 0, max_iters >= 1, target_label == -1.
  void validate() const;
};

struct PerturbationState {
  Tensor xi;
  std::size_t iteration = 0;
  std::vector<bool> active;  // per original detection
};

/// Binary image-shaped mask, 1 exactly on the half-open pixel rectangle
/// [x0, x1) x [y0, y1).
struct CropMask {
  Tensor mask;
  int instance = -1;
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

/// Odd `side` square centered on the pixel holding the box center, clipped to
/// the image.
CropMask make_crop_mask(const Shape& image_shape, const Box& box, std::size_t side, int instance);
CropMask full_mask(const Shape& image_shape, int instance);
/// Elementwise product; exact zeros outside the mask.
Tensor crop_apply(const CropMask& mask, const Tensor& gradient);

/// Proposals on the perturbed image grouped by the original detection that
/// owns their anchor center. Keeps the activations for the backward passes.
struct ActiveTargets {
  Activations acts;
  std::vector<Tensor> logits;
  std::vector<Proposal> proposals;
  std::vector<std::vector<std::size_t>> per_instance;

  std::size_t active_instances() const;
  std::size_t target_count() const;
};

ActiveTargets active_targets(const DetectorModel& model, const Tensor& perturbed_image,
                             std::span<const Box> original_detections);

/// Cotangent maps that are nonzero only on the given proposals. With
/// `unit_weight` every entry is 1 (raw score sum); otherwise it is the
/// derivative of the targeted loss softplus(logit), i.e. sigmoid(logit).
std::vector<Tensor> target_cotangents(const ActiveTargets& targets,
                                      std::span<const std::size_t> proposal_ids, bool unit_weight);

/// The proposal with the highest targeted loss, ties to the earliest in
/// (scale, row, col) order.
std::size_t highest_loss_target(const ActiveTargets& targets, std::span<const std::size_t> ids);

/// xi <- clip_eps(xi - alpha * sign(g)), sign(0) = 0.
void imp_ifgsm_step(PerturbationState& state, const Tensor& gradient, const AttackConfig& cfg);

/// xi <- clip_eps(xi - g / |g|^2). Returns false (and leaves xi alone) when
/// |g| < 1e-12.
bool imp_deepfool_step(PerturbationState& state, const Tensor& gradient, const AttackConfig& cfg);

/// One LIP iteration: a separate backward pass per active instance, each
/// cropped by that instance's mask, summed, sign-normalized and clipped.
void lip_iteration(const DetectorModel& model, const ActiveTargets& targets,
                   std::span<const CropMask> masks, PerturbationState& state,
                   const AttackConfig& cfg);

/// One LP iteration: a single backward pass over every active target,
/// multiplied by the union of the masks.
void lp_iteration(const DetectorModel& model, const ActiveTargets& targets,
                  std::span<const CropMask> masks, PerturbationState& state,
                  const AttackConfig& cfg);

struct AttackResult {
  Tensor xi;
  Tensor adversarial;  // clamp(image + xi, 0, 255)
  std::vector<Detection> originals;
  std::vector<Detection> final_detections;  // on the adversarial image
  std::vector<bool> removed;
  std::size_t iterations = 0;
  std::vector<std::size_t> active_counts;  // active targets seen at each iteration
  bool stalled = false;

  std::size_t removed_count() const;
};

/// Called after every iteration with the updated state.
using IterationObserver = std::function<void(const PerturbationState&)>;

/// Masks come from the per-scale profiles (ignored by the IMP methods).
AttackResult run_attack(const DetectorModel& model, const Tensor& image, const AttackConfig& cfg,
                        std::span<const ErfProfile> profiles,
                        const IterationObserver& observer = {});

/// Same loop with caller-supplied masks, one per clean detection. `masks`
/// is consulted only by LP and LIP.
AttackResult run_attack_with_masks(const DetectorModel& model, const Tensor& image,
                                   const AttackConfig& cfg,
                                   const std::function<std::vector<CropMask>(
                                       const std::vector<Detection>&)>& make_masks,
                                   const IterationObserver& observer = {});

/// Masks for the clean detections from the profile of each one's scale.
std::vector<CropMask> profile_masks(const Shape& image_shape, std::span<const Detection> detections,
                                    std::span<const ErfProfile> profiles);

}  // namespace erfattack
