#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <vector>

#include "erfattack/attacks.hpp"
#include "erfattack/synth.hpp"

namespace erfattack {

/// n_side x n_side copies of one glyph, centers `spacing` pixels apart.
struct GridSpec {
  int face_side = 24;
  int n_side = 1;
  int spacing = 29;
  int margin = 16;
  std::uint64_t seed = 0;

  /// spacing >= face_side, n_side >= 1, face_side >= kMinGlyphSide, margin >= 0.
  void validate() const;
};

struct GridScene {
  SceneSpec scene;  // ground truth; scene.seed drives the background
  Tensor image;
};

/// The image side is (n_side - 1) * spacing + face_side + 2 * margin rounded
/// up to a multiple of `stride`; the grid sits at (margin, margin).
GridScene make_grid(const GridSpec& spec, int stride = 4);

/// Spacing in whole pixels for a multiple of the face side.
int spacing_for(int face_side, double multiple);

struct Metrics {
  std::size_t faces = 0;
  std::size_t detected_before = 0;  // detections on the clean image
  std::size_t removed = 0;          // clean detections with no IoU >= 0.3 match afterwards
  std::size_t truth_before = 0;     // ground-truth faces matched before
  std::size_t truth_after = 0;      // ground-truth faces matched after
  /// removed / detected_before; empty when nothing was detected.
  std::optional<double> success_rate() const;
  std::optional<double> detection_rate_before() const;
  std::optional<double> detection_rate_after() const;
};

Metrics compute_metrics(std::span<const Box> before, std::span<const Box> after,
                        std::span<const Box> ground_truth);

struct SweepOptions {
  std::vector<Method> methods;
  std::vector<int> n_sides{1, 2, 3, 4};
  std::vector<int> spacings{29, 48, 72};
  int face_side = 24;
  std::size_t scenes = 20;
  std::uint64_t seed = 17;
  AttackConfig attack;
  /// When set, X^adv of the first scene of every condition is written here.
  std::optional<std::filesystem::path> dump_dir;
};

struct SceneRecord {
  Method method = Method::ImpIfgsm;
  int n_side = 0;
  int spacing = 0;
  std::size_t scene_index = 0;
  std::uint64_t scene_seed = 0;
  Metrics metrics;
  std::size_t iterations = 0;
  bool stalled = false;
};

struct ConditionSummary {
  Method method = Method::ImpIfgsm;
  int n_side = 0;
  int spacing = 0;
  std::size_t scenes = 0;
  Metrics totals;  // summed over scenes
  double mean_iterations = 0.0;
};

struct SweepReport {
  std::vector<SceneRecord> records;      // sorted by condition, then scene
  std::vector<ConditionSummary> summary;  // one per condition, same order

  /// Pooled success rate removed / detected of one condition.
  std::optional<double> success(Method method, int n_side, int spacing) const;
};

/// Attacks every scene of every (method, n_side, spacing) condition; scene k
/// uses seed derive_seed(options.seed, k) in every condition. Runs on the
/// work pool; the report does not depend on the worker count.
SweepReport run_sweep(const DetectorModel& model, std::span<const ErfProfile> profiles,
                      const SweepOptions& options);

void write_csv(std::ostream& out, const SweepReport& report);
void write_json(std::ostream& out, const SweepReport& report, const SweepOptions& options);

}  // namespace erfattack
