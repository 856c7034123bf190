#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "erfattack/detector.hpp"

namespace erfattack {

/// Receptive-field geometry of one output node: output cell i (per axis)
/// theoretically depends on input pixels [i * jump + offset, ... + side).
struct ReceptiveField {
  std::size_t side = 1;
  std::size_t jump = 1;
  long offset = 0;
};

ReceptiveField receptive_field(const Graph& graph, int output_index = 0);
/// Side of the theoretical receptive field of the given output.
std::size_t theoretical_rf(const Graph& graph, int output_index = 0);

inline constexpr double kDefaultEnergyFraction = 0.90;

/// Gradient-energy distribution over the theoretical receptive field of one
/// head's center neuron. The map is [1, trf_side, trf_side], aligned with the
/// receptive-field window; (center_row, center_col) is the pixel holding the
/// anchor center.
struct ErfProfile {
  int scale_index = 0;
  Tensor energy_map;
  std::size_t crop_side = 0;
  std::size_t trf_side = 0;
  double energy_fraction = kDefaultEnergyFraction;
  std::size_t center_row = 0;
  std::size_t center_col = 0;
  /// The anchor center itself in window coordinates (pixel (r, c) spans
  /// [r, r+1) x [c, c+1)); with an even TRF it falls on a pixel corner.
  double anchor_row = 0.0;
  double anchor_col = 0.0;
};

/// Energy inside the odd `side` square centered on (row, col), clipped to the map.
double enclosed_energy(const Tensor& map, std::size_t row, std::size_t col, std::size_t side);

/// Smallest odd side <= max_side whose centered square holds at least
/// `fraction` of the energy. Throws DegenerateProfile if none does.
std::size_t minimal_crop_side(const Tensor& map, std::size_t row, std::size_t col,
                              double fraction, std::size_t max_side);

/// Averages |d logit(scale, center_cell) / d image| over the samples,
/// normalizes it to unit sum and derives the crop side. All samples must share
/// one shape and the receptive field of the center cell must fit inside them.
ErfProfile estimate_erf(const DetectorModel& model, int scale_index,
                        std::span<const Tensor> samples, std::size_t center_row,
                        std::size_t center_col, double energy_fraction = kDefaultEnergyFraction);

/// Single-glyph images for profiling one head: a face of the head's anchor
/// side on a noise image, its center drawn uniformly within one stride of the
/// middle cell's anchor center. Returns the images and that cell.
struct ErfSamples {
  std::vector<Tensor> images;
  std::size_t center_row = 0;
  std::size_t center_col = 0;
  /// The anchor center itself in window coordinates (pixel (r, c) spans
  /// [r, r+1) x [c, c+1)); with an even TRF it falls on a pixel corner.
  double anchor_row = 0.0;
  double anchor_col = 0.0;
};
ErfSamples erf_samples(const DetectorModel& model, int scale_index, std::size_t count,
                       std::uint64_t seed);

/// One profile per head from `count` samples each.
std::vector<ErfProfile> estimate_profiles(const DetectorModel& model, std::size_t count = 20,
                                          std::uint64_t seed = 17);

/// Ring-averaged energy around the anchor center: ring k holds the pixels
/// whose centers lie at distance [k, k+1) from it, up to the inscribed circle
/// of the window.
struct RadialReport {
  std::vector<double> ring_means;
  /// Largest relative increase ring[k+1] / ring[k] - 1 over adjacent rings
  /// (zero when ring means never increase).
  double max_violation = 0.0;
  /// The outermost ring is not strictly below the innermost: no decay at all.
  bool flat = false;

  bool decays_within(double slack) const { return !flat && max_violation <= slack; }
};

RadialReport radial_decay_check(const ErfProfile& profile);

// Export: <dir>/erf_scale<k>.csv (energy grid), erf_scale<k>.json
// {scale_index, crop_side, trf_side, energy_fraction, center_row, center_col}
// and erf_scale<k>.pgm (heat image scaled to the map maximum).
void write_profile(const std::filesystem::path& dir, const ErfProfile& profile);
ErfProfile read_profile(const std::filesystem::path& dir, int scale_index);
std::vector<ErfProfile> read_profiles(const std::filesystem::path& dir, std::size_t num_scales);

}  // namespace erfattack
