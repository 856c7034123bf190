#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "erfattack/bench.hpp"
#include "erfattack/train.hpp"

namespace erfattack {

struct PathsConfig {
  // Relative paths are resolved against the config file's directory.
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> profiles;
  std::optional<std::filesystem::path> scenes;
  std::optional<std::filesystem::path> output;
};

struct DetectorConfig {
  double score_threshold = 0.5;
  double nms_iou = 0.1;
};

struct ErfConfig {
  std::size_t samples = 20;
  double energy_fraction = kDefaultEnergyFraction;
};

struct BenchConfig {
  std::vector<Method> methods{Method::ImpIfgsm, Method::ImpDeepfool, Method::Lp, Method::LipA,
                              Method::LipH};
  std::vector<int> n_sides{1, 2, 3, 4};
  std::vector<int> spacings{29, 48, 72};  // center to center, pixels
  int face_side = 24;
  std::size_t scenes = 20;
  bool dump_images = false;
};

struct RunConfig {
  std::uint64_t seed = 17;
  PathsConfig paths;
  DetectorConfig detector;
  TrainRecipe train;
  DatasetRecipe data;
  ErfConfig erf;
  AttackConfig attack;
  BenchConfig bench;
};

/// Parses and validates a JSON config. Unknown keys, type mismatches and
/// out-of-range values raise ConfigError naming the source, line, column and
/// the offending key path.
RunConfig parse_config(const std::filesystem::path& file);
/// Same, from text; `source` names it in messages and `base_dir` anchors
/// relative paths.
RunConfig parse_config_text(std::string_view text, const std::string& source = "<config>",
                            const std::filesystem::path& base_dir = {});

/// Sweep options equivalent to the bench section.
SweepOptions sweep_options(const RunConfig& config);

}  // namespace erfattack
