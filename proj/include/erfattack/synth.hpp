#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "erfattack/tensor.hpp"

namespace erfattack {

/// Deterministic child seed; used to split one run seed per scene and per face.
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index);

/// Uniform double in [0, 1) from the raw engine output (portable across
/// standard libraries, unlike std::uniform_real_distribution).
double uniform01(std::mt19937_64& rng);
/// Uniform integer in [lo, hi].
int uniform_int(std::mt19937_64& rng, int lo, int hi);

/// Geometry of the synthetic face, in pixels relative to the patch center.
/// Every length is proportional to the side.
struct GlyphLayout {
  double disc_radius;
  double eye_dx;
  double eye_dy;
  double eye_radius;
  double mouth_dy;
  double mouth_half_width;
  double mouth_half_height;

  bool operator==(const GlyphLayout&) const = default;
};

enum class GlyphPart { Background, Disc, Eye, Mouth };

inline constexpr int kMinGlyphSide = 8;

GlyphLayout glyph_layout(int side);
/// Part under the point (dx, dy) measured from the patch center.
GlyphPart glyph_part(const GlyphLayout& layout, double dx, double dy);

/// A [1, side, side] face patch: bright disc with two dark eyes and a dark
/// mouth bar, over background noise. Pixel values are integers in [0, 255].
Tensor render_glyph(int side, std::uint64_t seed);

/// A [1, height, width] noise background.
Tensor noise_background(std::size_t width, std::size_t height, std::uint64_t seed);

/// Copies `patch` into `image` with its top-left corner at (x0, y0).
void paste(Tensor& image, const Tensor& patch, std::size_t x0, std::size_t y0);

struct FacePlacement {
  double cx = 0.0;
  double cy = 0.0;
  int side = 0;

  std::size_t left() const;
  std::size_t top() const;
  bool operator==(const FacePlacement&) const = default;
};

/// Ground truth for one synthetic image.
struct SceneSpec {
  std::size_t width = 0;
  std::size_t height = 0;
  std::uint64_t seed = 0;
  std::vector<FacePlacement> faces;

  /// Throws ConfigError unless every face lies fully inside the image on an
  /// integer pixel grid and is at least kMinGlyphSide wide.
  void validate() const;
  bool operator==(const SceneSpec&) const = default;
};

/// Background noise from the scene seed plus one glyph per face, each glyph
/// seeded by derive_seed(seed, face index).
Tensor render_scene(const SceneSpec& scene);

// Text format, one directive per line, '#' starts a comment:
//   size <width> <height>
//   seed <seed>
//   face <cx> <cy> <side>      (repeated)
std::string format_scene(const SceneSpec& scene);
SceneSpec parse_scene(std::string_view text);
SceneSpec load_scene(const std::filesystem::path& path);
void save_scene(const std::filesystem::path& path, const SceneSpec& scene);

}  // namespace erfattack
