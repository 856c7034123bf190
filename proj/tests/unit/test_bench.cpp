#include <doctest.h>

#include <cstdlib>
#include <sstream>

#include "erfattack/bench.hpp"
#include "erfattack/errors.hpp"

using namespace erfattack;

namespace {

double distance(const FacePlacement& a, const FacePlacement& b) { return std::hypot(a.cx - b.cx, a.cy - b.cy); }

}  // namespace

TEST_CASE("glyphs are seeded and scale with their side") {
  CHECK(render_glyph(24, 5) == render_glyph(24, 5));
  CHECK(!(render_glyph(24, 5) == render_glyph(24, 6)));
  CHECK_THROWS_AS(render_glyph(7, 1), ConfigError);

  const GlyphLayout a = glyph_layout(24), b = glyph_layout(48);
  CHECK(b.disc_radius == 2 * a.disc_radius);
  CHECK(b.eye_dx == 2 * a.eye_dx);
  CHECK(b.eye_dy == 2 * a.eye_dy);
  CHECK(b.eye_radius == 2 * a.eye_radius);
  CHECK(b.mouth_dy == 2 * a.mouth_dy);
  CHECK(b.mouth_half_width == 2 * a.mouth_half_width);
  CHECK(b.mouth_half_height == 2 * a.mouth_half_height);
  for (double dy = -24; dy < 24; dy += 0.5)
    for (double dx = -24; dx < 24; dx += 0.5) CHECK(glyph_part(b, dx, dy) == glyph_part(a, dx / 2, dy / 2));
}

TEST_CASE("glyph features are darker than the disc") {
  const Tensor g = render_glyph(48, 3);
  const GlyphLayout l = glyph_layout(48);
  double disc = 0, feat = 0;
  int nd = 0, nf = 0;
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x) {
      const GlyphPart p = glyph_part(l, x + 0.5 - 24, y + 0.5 - 24);
      const double v = g.at(0, y, x);
      CHECK(v >= 0.0);
      CHECK(v <= 255.0);
      CHECK(v == std::round(v));
      if (p == GlyphPart::Disc) disc += v, ++nd;
      if (p == GlyphPart::Eye || p == GlyphPart::Mouth) feat += v, ++nf;
    }
  REQUIRE(nd > 0);
  REQUIRE(nf > 0);
  CHECK(disc / nd > feat / nf + 50);
}

TEST_CASE("single face grid") {
  const GridScene g = make_grid({24, 1, 29, 16, 7});
  REQUIRE(g.scene.faces.size() == 1);
  CHECK(g.scene.faces[0] == FacePlacement{28.0, 28.0, 24});
  CHECK(g.image.shape() == Shape{1, 56, 56});
}

TEST_CASE("sixteen face grid at spacing 40") {
  const GridScene g = make_grid({24, 4, 40, 16, 7});
  CHECK(g.scene.faces.size() == 16);
  CHECK_NOTHROW(g.scene.validate());
  CHECK(g.image.dim(1) % 4 == 0);
  CHECK(g.image.dim(1) >= 3 * 40 + 24 + 32);
  // Every copy is the same glyph.
  const FacePlacement& f0 = g.scene.faces[0];
  for (const FacePlacement& f : g.scene.faces)
    for (int y = 0; y < 24; ++y)
      for (int x = 0; x < 24; ++x) CHECK(g.image.at(0, f.top() + y, f.left() + x) == g.image.at(0, f0.top() + y, f0.left() + x));
}

TEST_CASE("doubling the spacing doubles pairwise distances") {
  const GridScene a = make_grid({24, 3, 30, 16, 1}), b = make_grid({24, 3, 60, 16, 1});
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = i + 1; j < 9; ++j)
      CHECK(distance(b.scene.faces[i], b.scene.faces[j]) == doctest::Approx(2 * distance(a.scene.faces[i], a.scene.faces[j])));
}

TEST_CASE("grid validation") {
  CHECK_THROWS_AS(make_grid({24, 2, 23, 16, 1}), ConfigError);
  CHECK_THROWS_AS(make_grid({24, 0, 30, 16, 1}), ConfigError);
  CHECK_THROWS_AS(make_grid({6, 1, 30, 16, 1}), ConfigError);
  CHECK(make_grid({24, 2, 30, 16, 1}).image == make_grid({24, 2, 30, 16, 1}).image);
}

TEST_CASE("desk scale spacings") {
  CHECK(spacing_for(24, 1.2) == 29);
  CHECK(spacing_for(24, 2.0) == 48);
  CHECK(spacing_for(24, 3.0) == 72);
}

TEST_CASE("metric examples") {
  std::vector<Box> before;
  for (int i = 0; i < 16; ++i) before.push_back({20.0 + 40 * (i % 4), 20.0 + 40 * (i / 4), 24});
  const Metrics same = compute_metrics(before, before, before);
  CHECK(same.success_rate() == 0.0);
  CHECK(same.detection_rate_before() == 1.0);
  const Metrics gone = compute_metrics(before, {}, before);
  CHECK(gone.success_rate() == 1.0);
  CHECK(gone.detection_rate_after() == 0.0);
  const std::vector<Box> six(before.begin(), before.begin() + 6);
  const Metrics part = compute_metrics(before, six, before);
  CHECK(part.removed == 10);
  CHECK(*part.success_rate() == 0.625);
  const Metrics none = compute_metrics({}, {}, before);
  CHECK(!none.success_rate().has_value());
  CHECK(none.detection_rate_before() == 0.0);
  CHECK(!compute_metrics({}, {}, {}).detection_rate_before().has_value());
  // A survivor that moved a little still counts as surviving.
  const std::vector<Box> shifted{{before[0].cx + 3, before[0].cy, 24}};
  CHECK(compute_metrics(std::span(before.data(), 1), shifted, {}).removed == 0);
}

TEST_CASE("empty sweep") {
  SweepOptions o;
  o.methods = {};
  const SweepReport r = run_sweep(make_zero_detector(), {}, o);
  CHECK(r.records.empty());
  CHECK(r.summary.empty());
  std::ostringstream csv;
  write_csv(csv, r);
  CHECK(csv.str() ==
        "row,method,n_faces,spacing,scene,seed,detected_before,removed,attack_success_rate,"
        "detection_rate_before,detection_rate_after,iterations,stalled\n");
  CHECK_THROWS_AS(r.success(Method::LipH, 1, 29), ConfigError);
}

TEST_CASE("sweep report is independent of the worker count") {
  const DetectorModel m = make_detector(11);
  SweepOptions o;
  o.methods = {Method::ImpIfgsm, Method::ImpDeepfool};
  o.n_sides = {1, 2};
  o.spacings = {29};
  o.scenes = 3;
  o.attack.max_iters = 3;
  const auto csv_with = [&](const char* threads) {
    setenv("ERFATTACK_THREADS", threads, 1);
    std::ostringstream out;
    write_csv(out, run_sweep(m, {}, o));
    return out.str();
  };
  const std::string one = csv_with("1"), three = csv_with("3");
  unsetenv("ERFATTACK_THREADS");
  CHECK(one == three);
  CHECK(one.find("aggregate,imp-deepfool,4,29,all,3,") != std::string::npos);

  const SweepReport r = run_sweep(m, {}, o);
  REQUIRE(r.records.size() == 12);
  for (const SceneRecord& rec : r.records) {
    CHECK(rec.scene_seed == derive_seed(17, rec.scene_index));
    CHECK(rec.metrics.removed <= rec.metrics.detected_before);
    if (const auto s = rec.metrics.success_rate()) {
      CHECK(*s >= 0.0);
      CHECK(*s <= 1.0);
      CHECK(*s == static_cast<double>(rec.metrics.removed) / rec.metrics.detected_before);
    }
  }
  std::ostringstream json;
  write_json(json, r, o);
  CHECK(json.str().find("\"scene_seeds\"") != std::string::npos);
}
