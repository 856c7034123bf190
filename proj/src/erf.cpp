#include "erfattack/erf.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "erfattack/errors.hpp"
#include "erfattack/pgm.hpp"
#include "erfattack/synth.hpp"

namespace erfattack {

ReceptiveField receptive_field(const Graph& graph, int output_index) {
  if (output_index < 0 || output_index >= static_cast<int>(graph.outputs().size())) {
    throw ConfigError("no output " + std::to_string(output_index));
  }
  std::vector<int> path;
  for (int n = graph.outputs()[output_index]; n != -1; n = graph.nodes()[n].input) path.push_back(n);
  std::reverse(path.begin(), path.end());
  ReceptiveField rf;
  for (int n : path) {
    const Node& node = graph.nodes()[n];
    if (node.kind == OpKind::Conv2d) {
      const std::size_t k = node.weights.dim(2);
      rf.side += (k - 1) * rf.jump;
      rf.offset -= static_cast<long>((k / 2) * rf.jump);
    } else if (node.kind == OpKind::MaxPool2) {
      rf.side += rf.jump;
      rf.jump *= 2;
    }
  }
  return rf;
}

std::size_t theoretical_rf(const Graph& graph, int output_index) {
  return receptive_field(graph, output_index).side;
}

double enclosed_energy(const Tensor& map, std::size_t row, std::size_t col, std::size_t side) {
  const long half = static_cast<long>(side / 2);
  const long h = static_cast<long>(map.dim(1)), w = static_cast<long>(map.dim(2));
  double acc = 0.0;
  for (long y = std::max(0L, static_cast<long>(row) - half);
       y <= std::min(h - 1, static_cast<long>(row) + half); ++y) {
    for (long x = std::max(0L, static_cast<long>(col) - half);
         x <= std::min(w - 1, static_cast<long>(col) + half); ++x) {
      acc += map.at(0, y, x);
    }
  }
  return acc;
}

std::size_t minimal_crop_side(const Tensor& map, std::size_t row, std::size_t col,
                              double fraction, std::size_t max_side) {
  const double total = sum(map);
  if (!(total > 0.0)) throw DegenerateProfile("energy map is identically zero");
  for (std::size_t side = 1; side <= max_side; side += 2) {
    if (enclosed_energy(map, row, col, side) >= fraction * total) return side;
  }
  throw DegenerateProfile("no odd square up to " + std::to_string(max_side) + " holds " +
                          std::to_string(fraction) + " of the energy");
}

ErfProfile estimate_erf(const DetectorModel& model, int scale_index,
                        std::span<const Tensor> samples, std::size_t center_row,
                        std::size_t center_col, double energy_fraction) {
  if (samples.empty()) throw ConfigError("ERF estimation needs at least one sample");
  if (!(energy_fraction > 0.0 && energy_fraction <= 1.0)) {
    throw ConfigError("energy fraction must lie in (0, 1]");
  }
  const ReceptiveField rf = receptive_field(model.graph, scale_index);
  const long y0 = static_cast<long>(center_row * rf.jump) + rf.offset;
  const long x0 = static_cast<long>(center_col * rf.jump) + rf.offset;
  const Shape& shape = samples.front().shape();
  if (y0 < 0 || x0 < 0 || y0 + static_cast<long>(rf.side) > static_cast<long>(shape.at(1)) ||
      x0 + static_cast<long>(rf.side) > static_cast<long>(shape.at(2))) {
    throw ConfigError("receptive field of cell (" + std::to_string(center_row) + "," +
                      std::to_string(center_col) + ") exceeds the sample image");
  }

  Tensor energy({1, rf.side, rf.side});
  for (const Tensor& image : samples) {
    if (image.shape() != shape) throw ConfigError("ERF samples must share one shape");
    const Activations acts = forward_activations(model, image);
    std::vector<Tensor> cot(model.num_scales());
    const Tensor& logits = acts.values[model.graph.outputs()[scale_index]];
    if (center_row >= logits.dim(1) || center_col >= logits.dim(2)) {
      throw ConfigError("center cell outside the logit map");
    }
    cot[scale_index] = Tensor::zeros_like(logits);
    cot[scale_index].at(0, center_row, center_col) = 1.0;
    const Tensor g = input_gradient(model, acts, cot);
    for (std::size_t y = 0; y < rf.side; ++y) {
      for (std::size_t x = 0; x < rf.side; ++x) {
        energy.at(0, y, x) += std::abs(g.at(0, y0 + y, x0 + x));
      }
    }
  }
  const double total = sum(energy);
  if (!(total > 0.0)) throw DegenerateProfile("zero input gradient for every sample");
  for (double& v : energy.data()) v /= total;

  ErfProfile p;
  p.scale_index = scale_index;
  p.trf_side = rf.side;
  p.energy_fraction = energy_fraction;
  // The anchor center sits at (cell + 0.5) * stride; take the pixel holding it.
  p.center_row = static_cast<std::size_t>(
      std::floor((center_row + 0.5) * model.stride) - static_cast<double>(y0));
  p.center_col = static_cast<std::size_t>(
      std::floor((center_col + 0.5) * model.stride) - static_cast<double>(x0));
  p.anchor_row = (center_row + 0.5) * model.stride - static_cast<double>(y0);
  p.anchor_col = (center_col + 0.5) * model.stride - static_cast<double>(x0);
  p.crop_side = minimal_crop_side(energy, p.center_row, p.center_col, energy_fraction, rf.side);
  p.energy_map = std::move(energy);
  return p;
}

ErfSamples erf_samples(const DetectorModel& model, int scale_index, std::size_t count,
                       std::uint64_t seed) {
  const ReceptiveField rf = receptive_field(model.graph, scale_index);
  const double scale = model.scales.at(scale_index);
  const int stride = model.stride;
  // Faces of the anchor side centered within one stride of the anchor
  // center, so the map is not tied to one alignment of the glyph features.
  const int jitter = stride;
  const int face = static_cast<int>(std::lround(scale));
  std::size_t side = std::max<std::size_t>(face + 2 * jitter + 2, rf.side) + 4 * stride;
  side = (side + stride - 1) / stride * stride;
  ErfSamples out;
  out.center_row = out.center_col = side / stride / 2;
  const int corner = static_cast<int>(out.center_col) * stride;  // top-left pixel of the cell
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t s = derive_seed(seed, 7919 * (scale_index + 1) + i);
    std::mt19937_64 rng(s);
    const int left = corner + uniform_int(rng, -jitter, jitter) - face / 2 + stride / 2;
    const int top = corner + uniform_int(rng, -jitter, jitter) - face / 2 + stride / 2;
    SceneSpec scene{side, side, s, {{left + face / 2.0, top + face / 2.0, face}}};
    out.images.push_back(render_scene(scene));
  }
  return out;
}

std::vector<ErfProfile> estimate_profiles(const DetectorModel& model, std::size_t count,
                                          std::uint64_t seed) {
  std::vector<ErfProfile> profiles;
  for (std::size_t s = 0; s < model.num_scales(); ++s) {
    const ErfSamples samples = erf_samples(model, static_cast<int>(s), count, seed);
    profiles.push_back(estimate_erf(model, static_cast<int>(s), samples.images,
                                    samples.center_row, samples.center_col));
  }
  return profiles;
}

RadialReport radial_decay_check(const ErfProfile& profile) {
  const Tensor& map = profile.energy_map;
  const double cy = profile.anchor_row, cx = profile.anchor_col;
  const double max_radius = std::min({cy, cx, map.dim(1) - cy, map.dim(2) - cx});
  const auto rings = static_cast<std::size_t>(std::max(1.0, std::floor(max_radius)));
  std::vector<double> total(rings, 0.0);
  std::vector<std::size_t> count(rings, 0);
  for (std::size_t y = 0; y < map.dim(1); ++y) {
    for (std::size_t x = 0; x < map.dim(2); ++x) {
      const double r = std::hypot(y + 0.5 - cy, x + 0.5 - cx);
      const auto k = static_cast<std::size_t>(std::floor(r));
      if (k >= rings) continue;
      total[k] += map.at(0, y, x);
      ++count[k];
    }
  }
  RadialReport report;
  for (std::size_t k = 0; k < rings; ++k) report.ring_means.push_back(total[k] / count[k]);
  for (std::size_t k = 0; k + 1 < rings; ++k) {
    const double a = report.ring_means[k], b = report.ring_means[k + 1];
    if (b > a) report.max_violation = std::max(report.max_violation, a > 0.0 ? b / a - 1.0 : 1e300);
  }
  // Rounding makes equal rings differ in the last bits, so demand a real drop.
  report.flat = !(report.ring_means.back() < report.ring_means.front() * (1.0 - 1e-9));
  return report;
}

namespace {

std::filesystem::path profile_path(const std::filesystem::path& dir, int k, const char* ext) {
  return dir / ("erf_scale" + std::to_string(k) + ext);
}

}  // namespace

void write_profile(const std::filesystem::path& dir, const ErfProfile& profile) {
  std::filesystem::create_directories(dir);
  const Tensor& map = profile.energy_map;
  {
    std::ofstream csv(profile_path(dir, profile.scale_index, ".csv"));
    if (!csv) throw IoError("cannot write profile CSV in " + dir.string());
    csv << std::setprecision(17);
    for (std::size_t y = 0; y < map.dim(1); ++y) {
      for (std::size_t x = 0; x < map.dim(2); ++x) csv << (x ? "," : "") << map.at(0, y, x);
      csv << '\n';
    }
  }
  {
    nlohmann::ordered_json j;
    j["scale_index"] = profile.scale_index;
    j["crop_side"] = profile.crop_side;
    j["trf_side"] = profile.trf_side;
    j["energy_fraction"] = profile.energy_fraction;
    j["center_row"] = profile.center_row;
    j["center_col"] = profile.center_col;
    j["anchor_row"] = profile.anchor_row;
    j["anchor_col"] = profile.anchor_col;
    std::ofstream out(profile_path(dir, profile.scale_index, ".json"));
    if (!out) throw IoError("cannot write profile JSON in " + dir.string());
    out << j.dump(2) << '\n';
  }
  Tensor heat(map.shape());
  const double peak = std::max(max_abs(map), 1e-300);
  for (std::size_t i = 0; i < map.size(); ++i) heat[i] = 255.0 * map[i] / peak;
  save_pgm(profile_path(dir, profile.scale_index, ".pgm"), heat);
}

ErfProfile read_profile(const std::filesystem::path& dir, int scale_index) {
  std::ifstream meta(profile_path(dir, scale_index, ".json"));
  if (!meta) throw IoError("missing profile metadata for scale " + std::to_string(scale_index));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad profile metadata: ") + e.what());
  }
  ErfProfile p;
  try {
    p.scale_index = j.at("scale_index").get<int>();
    p.crop_side = j.at("crop_side").get<std::size_t>();
    p.trf_side = j.at("trf_side").get<std::size_t>();
    p.energy_fraction = j.at("energy_fraction").get<double>();
    p.center_row = j.at("center_row").get<std::size_t>();
    p.center_col = j.at("center_col").get<std::size_t>();
    p.anchor_row = j.at("anchor_row").get<double>();
    p.anchor_col = j.at("anchor_col").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad profile metadata: ") + e.what());
  }
  if (p.scale_index != scale_index || p.crop_side % 2 == 0 || p.crop_side > p.trf_side) {
    throw IoError("inconsistent profile metadata for scale " + std::to_string(scale_index));
  }
  std::ifstream csv(profile_path(dir, scale_index, ".csv"));
  if (!csv) throw IoError("missing profile grid for scale " + std::to_string(scale_index));
  std::vector<double> values;
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::stringstream fields(line);
    std::string cell;
    while (std::getline(fields, cell, ',')) values.push_back(std::stod(cell));
    ++rows;
  }
  if (rows != p.trf_side || values.size() != rows * rows) {
    throw IoError("profile grid does not match trf_side for scale " + std::to_string(scale_index));
  }
  p.energy_map = Tensor({1, rows, rows}, std::move(values));
  return p;
}

std::vector<ErfProfile> read_profiles(const std::filesystem::path& dir, std::size_t num_scales) {
  std::vector<ErfProfile> out;
  for (std::size_t k = 0; k < num_scales; ++k) out.push_back(read_profile(dir, static_cast<int>(k)));
  return out;
}

}  // namespace erfattack
