#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "erfattack/erf.hpp"
#include "erfattack/errors.hpp"
#include "erfattack/synth.hpp"
#include "oracles.hpp"

using namespace erfattack;
namespace fs = std::filesystem;

namespace {

// Makes every weight positive so a large input bump always reaches the output.
void make_positive(Graph& g) {
  for (Node& n : g.nodes())
    for (double& w : n.weights.data()) w = 0.1 + std::abs(w);
}

struct Extent {
  long y0 = 1 << 30, x0 = 1 << 30, y1 = -1, x1 = -1;
  long side() const { return std::max(y1 - y0, x1 - x0) + 1; }
};

// Bumps each input pixel in turn and records which ones move output cell
// (row, col) of `output`.
Extent probe(const Graph& g, const Tensor& input, int output, std::size_t row, std::size_t col) {
  const double base = forward(g, input)[output].at(0, row, col);
  Extent e;
  Tensor x = input;
  for (std::size_t y = 0; y < x.dim(1); ++y)
    for (std::size_t xx = 0; xx < x.dim(2); ++xx) {
      const double v = x.at(0, y, xx);
      x.at(0, y, xx) = v + 1000.0;
      const double moved = forward(g, x)[output].at(0, row, col);
      x.at(0, y, xx) = v;
      if (moved != base) {
        e.y0 = std::min(e.y0, static_cast<long>(y));
        e.y1 = std::max(e.y1, static_cast<long>(y));
        e.x0 = std::min(e.x0, static_cast<long>(xx));
        e.x1 = std::max(e.x1, static_cast<long>(xx));
      }
    }
  return e;
}

Tensor positive_input(std::size_t side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor t({1, side, side});
  for (double& v : t.data()) v = 1.0 + uniform01(rng);
  return t;
}

ErfProfile profile_from(const Tensor& map, double anchor) {
  ErfProfile p;
  p.energy_map = map;
  p.trf_side = map.dim(1);
  p.anchor_row = p.anchor_col = anchor;
  p.center_row = p.center_col = static_cast<std::size_t>(anchor);
  return p;
}

}  // namespace

TEST_CASE("receptive field of a single 3x3 conv is 3") {
  std::mt19937_64 rng(1);
  Graph g(1);
  g.add_output(g.add_conv(-1, oracle::random_tensor(rng, {1, 1, 3, 3})));
  make_positive(g);
  CHECK(theoretical_rf(g) == 3);
  const Extent e = probe(g, positive_input(9, 1), 0, 4, 4);
  CHECK(e.side() == 3);
  CHECK(e.y0 == 3);
}

TEST_CASE("receptive field of conv, pool, conv is 8") {
  std::mt19937_64 rng(2);
  Graph g(1);
  g.add_output(g.add_conv(g.add_maxpool2(g.add_conv(-1, oracle::random_tensor(rng, {2, 1, 3, 3}))),
                          oracle::random_tensor(rng, {1, 2, 3, 3})));
  make_positive(g);
  CHECK(theoretical_rf(g) == 8);
  const ReceptiveField rf = receptive_field(g);
  const Extent e = probe(g, positive_input(20, 2), 0, 5, 5);
  CHECK(e.side() == 8);
  CHECK(e.y0 == static_cast<long>(5 * rf.jump) + rf.offset);
  CHECK(e.x0 == static_cast<long>(5 * rf.jump) + rf.offset);
}

TEST_CASE("detector receptive field matches the pixel probe") {
  DetectorModel m = make_detector(3);
  make_positive(m.graph);
  const ReceptiveField rf = receptive_field(m.graph, 1);
  CHECK(rf.side == 24);
  CHECK(rf.jump == 4);
  const Extent e = probe(m.graph, positive_input(48, 3), 1, 6, 6);
  CHECK(e.side() == 24);
  CHECK(e.y0 == 6 * 4 + rf.offset);
  CHECK(e.x0 == 6 * 4 + rf.offset);
  for (int s = 0; s < 3; ++s) CHECK(theoretical_rf(m.graph, s) == 24);
  CHECK_THROWS_AS(receptive_field(m.graph, 3), ConfigError);
}

TEST_CASE("minimal crop side agrees with brute force") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor map({1, 15, 15});
    for (double& v : map.data()) v = uniform01(rng) * uniform01(rng);
    const std::size_t r = 7, c = 6;
    const double total = sum(map);
    const double fraction = 0.5 + 0.45 * uniform01(rng);
    std::size_t expect = 0;
    for (std::size_t side = 1; side <= 15 && !expect; side += 2) {
      double in = 0.0;
      const long h = static_cast<long>(side / 2);
      for (long y = 0; y < 15; ++y)
        for (long x = 0; x < 15; ++x)
          if (std::abs(y - long(r)) <= h && std::abs(x - long(c)) <= h) in += map.at(0, y, x);
      if (in >= fraction * total) expect = side;
    }
    const std::size_t got = minimal_crop_side(map, r, c, fraction, 15);
    CHECK(got == expect);
    CHECK(got % 2 == 1);
    if (got > 1) CHECK(enclosed_energy(map, r, c, got - 2) < fraction * total);
  }
  CHECK_THROWS_AS(minimal_crop_side(Tensor({1, 5, 5}), 2, 2, 0.9, 5), DegenerateProfile);
}

TEST_CASE("gaussian map decays without violations") {
  const std::size_t n = 24;
  const double a = 12.0, sigma = 3.0;
  Tensor map({1, n, n});
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double r2 = (y + 0.5 - a) * (y + 0.5 - a) + (x + 0.5 - a) * (x + 0.5 - a);
      map.at(0, y, x) = std::exp(-r2 / (2 * sigma * sigma));
    }
  const double total = sum(map);
  for (double& v : map.data()) v /= total;
  const RadialReport r = radial_decay_check(profile_from(map, a));
  CHECK(r.max_violation == 0.0);
  CHECK(!r.flat);
  CHECK(r.decays_within(0.0));
  CHECK(r.ring_means.size() == 12);
  for (std::size_t k = 0; k + 1 < r.ring_means.size(); ++k) CHECK(r.ring_means[k + 1] < r.ring_means[k]);
}

TEST_CASE("uniform map is flagged as flat") {
  const Tensor map({1, 24, 24}, 1.0 / 576.0);
  const RadialReport r = radial_decay_check(profile_from(map, 12.0));
  CHECK(r.flat);
  CHECK(!r.decays_within(0.1));
  CHECK(!r.decays_within(1e9));
}

TEST_CASE("rising rings report their relative increase") {
  Tensor map({1, 8, 8}, 1.0);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      if (std::hypot(y + 0.5 - 4.0, x + 0.5 - 4.0) >= 2.0 && std::hypot(y + 0.5 - 4.0, x + 0.5 - 4.0) < 3.0)
        map.at(0, y, x) = 1.5;
  const RadialReport r = radial_decay_check(profile_from(map, 4.0));
  CHECK(r.max_violation == doctest::Approx(0.5));
  CHECK(!r.decays_within(0.1));
}

TEST_CASE("zero model gives a degenerate profile") {
  const DetectorModel z = make_zero_detector();
  const ErfSamples s = erf_samples(z, 1, 20, 1);
  CHECK(s.images.size() == 20);
  CHECK_THROWS_AS(estimate_erf(z, 1, s.images, s.center_row, s.center_col), DegenerateProfile);
}

TEST_CASE("receptive field outside the image is a configuration error") {
  const DetectorModel m = make_detector(5);
  const std::vector<Tensor> small{noise_background(32, 32, 1)};
  CHECK_THROWS_AS(estimate_erf(m, 0, small, 0, 0), ConfigError);
  CHECK_THROWS_AS(estimate_erf(m, 0, small, 4, 4, 1.5), ConfigError);
  CHECK_NOTHROW(estimate_erf(m, 0, small, 4, 4));
}

TEST_CASE("profile invariants on a random model") {
  const DetectorModel m = make_detector(6);
  for (int s = 0; s < 3; ++s) {
    const ErfSamples samples = erf_samples(m, s, 20, 9);
    const ErfProfile p = estimate_erf(m, s, samples.images, samples.center_row, samples.center_col);
    CHECK(sum(p.energy_map) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(*std::min_element(p.energy_map.data().begin(), p.energy_map.data().end()) >= 0.0);
    CHECK(p.trf_side == 24);
    CHECK(p.crop_side % 2 == 1);
    CHECK(p.crop_side <= p.trf_side);
    CHECK(enclosed_energy(p.energy_map, p.center_row, p.center_col, p.crop_side) >= 0.9);
    if (p.crop_side > 1) CHECK(enclosed_energy(p.energy_map, p.center_row, p.center_col, p.crop_side - 2) < 0.9);
    // The anchor point is (cell + 0.5) * stride inside the window.
    CHECK(p.anchor_row == 12.0);
    CHECK(p.center_row == 12);
  }
}

TEST_CASE("erf samples are seeded") {
  const DetectorModel m = make_detector(7);
  const ErfSamples a = erf_samples(m, 2, 20, 3), b = erf_samples(m, 2, 20, 3), c = erf_samples(m, 2, 20, 4);
  CHECK(a.images == b.images);
  CHECK(!(a.images == c.images));
}

TEST_CASE("profiles round trip through files") {
  const DetectorModel m = make_detector(8);
  const auto profiles = estimate_profiles(m, 20, 5);
  const fs::path dir = fs::temp_directory_path() / "erfattack_profile_test";
  fs::remove_all(dir);
  for (const ErfProfile& p : profiles) write_profile(dir, p);
  CHECK(fs::exists(dir / "erf_scale1.pgm"));
  const auto back = read_profiles(dir, 3);
  REQUIRE(back.size() == 3);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(back[k].energy_map == profiles[k].energy_map);
    CHECK(back[k].crop_side == profiles[k].crop_side);
    CHECK(back[k].anchor_col == profiles[k].anchor_col);
  }
  SUBCASE("inconsistent metadata is rejected") {
    std::ofstream(dir / "erf_scale0.json") << R"({"scale_index": 1, "crop_side": 9, "trf_side": 24,
      "energy_fraction": 0.9, "center_row": 12, "center_col": 12, "anchor_row": 12, "anchor_col": 12})";
    CHECK_THROWS_AS(read_profile(dir, 0), IoError);
  }
  SUBCASE("missing files are rejected") {
    fs::remove(dir / "erf_scale2.csv");
    CHECK_THROWS_AS(read_profile(dir, 2), IoError);
  }
  fs::remove_all(dir);
}
