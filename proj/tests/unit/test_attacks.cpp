#include <doctest.h>

#include "erfattack/attacks.hpp"
#include "erfattack/errors.hpp"
#include "erfattack/synth.hpp"
#include "oracles.hpp"

using namespace erfattack;

namespace {

PerturbationState fresh(const Shape& shape) { return {Tensor(shape), 0, {}}; }

AttackConfig config(Method m, double alpha = 1.0, double eps = 20.0, std::size_t iters = 40) {
  AttackConfig c;
  c.method = m;
  c.alpha = alpha;
  c.epsilon = eps;
  c.max_iters = iters;
  return c;
}

// An untrained detector and image pair with exactly `want` clean detections.
struct Case {
  DetectorModel model;
  Tensor image;
};

Case with_detections(std::size_t want, std::size_t side) {
  for (std::uint64_t seed = 1; seed < 500; ++seed) {
    Case c{make_detector(seed), noise_background(side, side, seed)};
    if (detect(c.model, c.image).detections.size() == want) return c;
  }
  FAIL("no random detector with the requested detection count");
  return {};
}

std::vector<CropMask> centered_masks(const Shape& shape, const std::vector<Detection>& dets, std::size_t side) {
  std::vector<CropMask> masks;
  for (std::size_t i = 0; i < dets.size(); ++i) masks.push_back(make_crop_mask(shape, dets[i].box, side, int(i)));
  return masks;
}

}  // namespace

TEST_CASE("method names round trip") {
  for (Method m : {Method::ImpIfgsm, Method::ImpDeepfool, Method::Lp, Method::LipA, Method::LipH})
    CHECK(parse_method(method_name(m)) == m);
  CHECK_THROWS_AS(parse_method("fgsm"), ConfigError);
  CHECK(uses_masks(Method::LipA));
  CHECK(!uses_masks(Method::ImpDeepfool));
}

TEST_CASE("attack config validation") {
  CHECK_NOTHROW(AttackConfig{}.validate());
  CHECK_THROWS_AS(config(Method::LipH, 0.0).validate(), ConfigError);
  CHECK_THROWS_AS(config(Method::LipH, -1.0).validate(), ConfigError);
  CHECK_THROWS_AS(config(Method::LipH, 1.0, -0.5).validate(), ConfigError);
  CHECK_THROWS_AS(config(Method::LipH, 1.0, 20.0, 0).validate(), ConfigError);
  AttackConfig untargeted;
  untargeted.target_label = 1.0;
  CHECK_THROWS_AS(untargeted.validate(), ConfigError);
}

TEST_CASE("I-FGSM step examples") {
  const AttackConfig cfg = config(Method::ImpIfgsm);
  PerturbationState s = fresh({1, 2, 2});
  imp_ifgsm_step(s, Tensor({1, 2, 2}), cfg);
  CHECK(max_abs(s.xi) == 0.0);

  const Tensor g({1, 2, 2}, std::vector<double>{0.3, -2.0, 0.0, 1e-9});
  imp_ifgsm_step(s, g, cfg);
  CHECK(s.xi == Tensor({1, 2, 2}, std::vector<double>{-1.0, 1.0, 0.0, -1.0}));
  for (int i = 1; i < 40; ++i) imp_ifgsm_step(s, g, cfg);
  CHECK(s.xi == Tensor({1, 2, 2}, std::vector<double>{-20.0, 20.0, 0.0, -20.0}));
  CHECK_THROWS_AS(imp_ifgsm_step(s, Tensor({1, 3, 3}), cfg), ConfigError);
}

TEST_CASE("DeepFool step examples") {
  const AttackConfig cfg = config(Method::ImpDeepfool);
  SUBCASE("unit norm gradient steps by -g") {
    PerturbationState s = fresh({1, 1, 2});
    const Tensor g({1, 1, 2}, std::vector<double>{0.6, -0.8});
    CHECK(imp_deepfool_step(s, g, cfg));
    CHECK(s.xi[0] == -0.6);
    CHECK(s.xi[1] == 0.8);
  }
  SUBCASE("scaling the gradient by c scales the step by 1/c") {
    std::mt19937_64 rng(1);
    const Tensor g = oracle::random_tensor(rng, {1, 4, 4});
    Tensor g3 = g;
    for (double& v : g3.data()) v *= 3.0;
    PerturbationState a = fresh(g.shape()), b = fresh(g.shape());
    imp_deepfool_step(a, g, cfg);
    imp_deepfool_step(b, g3, cfg);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(b.xi[i] == doctest::Approx(a.xi[i] / 3.0).epsilon(1e-14));
  }
  SUBCASE("one nonzero pixel moves by -1/v") {
    PerturbationState s = fresh({1, 3, 3});
    Tensor g({1, 3, 3});
    g.at(0, 1, 2) = 0.25;
    imp_deepfool_step(s, g, cfg);
    CHECK(s.xi.at(0, 1, 2) == -4.0);
    CHECK(max_abs(s.xi) == 4.0);
  }
  SUBCASE("steps are clipped") {
    PerturbationState s = fresh({1, 1, 1});
    imp_deepfool_step(s, Tensor({1, 1, 1}, 0.01), cfg);
    CHECK(s.xi[0] == -20.0);
  }
  SUBCASE("vanishing gradient stalls") {
    PerturbationState s = fresh({1, 2, 2});
    s.xi[0] = 3.0;
    CHECK(!imp_deepfool_step(s, Tensor({1, 2, 2}, 1e-14), cfg));
    CHECK(s.xi[0] == 3.0);
  }
}

TEST_CASE("crop masks") {
  const Shape shape{1, 20, 30};
  const CropMask m = make_crop_mask(shape, {10.7, 8.2, 24}, 5, 3);
  CHECK(m.instance == 3);
  CHECK(m.x0 == 8);
  CHECK(m.x1 == 13);
  CHECK(m.y0 == 6);
  CHECK(m.y1 == 11);
  CHECK(sum(m.mask) == 25.0);
  for (std::size_t y = 0; y < 20; ++y)
    for (std::size_t x = 0; x < 30; ++x) {
      const bool inside = x >= 8 && x < 13 && y >= 6 && y < 11;
      CHECK(m.mask.at(0, y, x) == (inside ? 1.0 : 0.0));
    }
  const CropMask edge = make_crop_mask(shape, {1.0, 19.5, 24}, 7, 0);
  CHECK(edge.x0 == 0);
  CHECK(edge.x1 == 5);
  CHECK(edge.y0 == 16);
  CHECK(edge.y1 == 20);
  CHECK(sum(edge.mask) == 20.0);
  CHECK_THROWS_AS(make_crop_mask(shape, {10, 10, 24}, 4, 0), ConfigError);
  CHECK(sum(full_mask(shape, 0).mask) == 600.0);
}

TEST_CASE("crop_apply is an elementwise product") {
  std::mt19937_64 rng(2);
  const Tensor g = oracle::random_tensor(rng, {1, 9, 11});
  CHECK(crop_apply(full_mask(g.shape(), 0), g) == g);
  CropMask zero{Tensor(g.shape()), 0, 0, 0, 0, 0};
  CHECK(max_abs(crop_apply(zero, g)) == 0.0);
  for (int trial = 0; trial < 20; ++trial) {
    CropMask m{Tensor(g.shape()), 0, 0, 0, 0, 0};
    for (double& v : m.mask.data()) v = uniform01(rng) < 0.4 ? 1.0 : 0.0;
    const Tensor out = crop_apply(m, g);
    for (std::size_t i = 0; i < g.size(); ++i) {
      CHECK(out[i] == m.mask[i] * g[i]);
      if (m.mask[i] == 0.0) CHECK(std::signbit(out[i]) == false);
    }
  }
  CHECK_THROWS_AS(crop_apply(zero, Tensor({1, 2, 2})), ConfigError);
}

TEST_CASE("target cotangents and highest loss selection") {
  ActiveTargets t;
  t.logits = {Tensor({1, 2, 2}), Tensor({1, 2, 2})};
  t.proposals = {{0, 0, 1, {}, 0.5, 0.0}, {1, 1, 0, {}, 2.0, 0.0}, {1, 1, 1, {}, 2.0, 0.0}};
  t.per_instance = {{0, 1, 2}};
  const std::vector<std::size_t> all{0, 1, 2};
  const auto weighted = target_cotangents(t, all, false);
  CHECK(weighted[0].at(0, 0, 1) == doctest::Approx(sigmoid(0.5)));
  CHECK(weighted[1].at(0, 1, 0) == doctest::Approx(sigmoid(2.0)));
  const auto unit = target_cotangents(t, all, true);
  CHECK(sum(unit[0]) + sum(unit[1]) == 3.0);
  // Equal logits: the earlier proposal in (scale, row, col) order wins.
  const std::size_t best = highest_loss_target(t, all);
  CHECK(best == 1);
  const auto single = target_cotangents(t, std::span(&best, 1), false);
  CHECK(single[0].empty());
  CHECK(std::count_if(single[1].data().begin(), single[1].data().end(), [](double v) { return v != 0.0; }) == 1);
  CHECK_THROWS_AS(highest_loss_target(t, {}), ConfigError);
}

TEST_CASE("no detections means no iterations") {
  const DetectorModel z = make_zero_detector();
  const Tensor image = noise_background(32, 32, 1);
  for (Method m : {Method::ImpIfgsm, Method::LipH}) {
    const AttackResult r = run_attack(z, image, config(m), {});
    CHECK(r.iterations == 0);
    CHECK(r.originals.empty());
    CHECK(r.removed.empty());
    CHECK(max_abs(r.xi) == 0.0);
    CHECK(r.adversarial == image);
  }
}

TEST_CASE("clean active targets equal the detection's proposals") {
  const Case c = with_detections(2, 40);
  const DetectionResult d = detect(c.model, c.image);
  const ActiveTargets t = active_targets(c.model, c.image, boxes_of(d.detections));
  REQUIRE(t.per_instance.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) CHECK(t.per_instance[i] == d.detections[i].proposal_ids);
  // Every target's anchor center lies in the box that owns it.
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t id : t.per_instance[i]) CHECK(d.detections[i].box.contains(t.proposals[id].box.cx, t.proposals[id].box.cy));
}

TEST_CASE("full mask LIP-A, LP and I-FGSM coincide for one instance") {
  const Case c = with_detections(1, 32);
  std::vector<Tensor> ifgsm, lipa, lp;
  const auto record = [](std::vector<Tensor>& into) { return [&into](const PerturbationState& s) { into.push_back(s.xi); }; };
  const auto full = [&](const std::vector<Detection>& d) {
    std::vector<CropMask> m;
    for (std::size_t i = 0; i < d.size(); ++i) m.push_back(full_mask(c.image.shape(), int(i)));
    return m;
  };
  const AttackResult a = run_attack_with_masks(c.model, c.image, config(Method::ImpIfgsm, 1, 20, 10), full, record(ifgsm));
  const AttackResult b = run_attack_with_masks(c.model, c.image, config(Method::LipA, 1, 20, 10), full, record(lipa));
  const AttackResult p = run_attack_with_masks(c.model, c.image, config(Method::Lp, 1, 20, 10), full, record(lp));
  REQUIRE(!ifgsm.empty());
  CHECK(ifgsm == lipa);
  CHECK(ifgsm == lp);
  CHECK(a.xi == b.xi);
  CHECK(a.removed == b.removed);
}

TEST_CASE("clip and support invariants hold every iteration") {
  const Case c = with_detections(3, 48);
  const auto masks = [&](const std::vector<Detection>& d) { return centered_masks(c.image.shape(), d, 9); };
  const auto dets = detect(c.model, c.image).detections;
  CropMask uni{Tensor(c.image.shape()), -1, 0, 0, 0, 0};
  for (const CropMask& m : masks(dets))
    for (std::size_t i = 0; i < uni.mask.size(); ++i) uni.mask[i] = std::max(uni.mask[i], m.mask[i]);
  for (Method m : {Method::ImpIfgsm, Method::ImpDeepfool, Method::Lp, Method::LipA, Method::LipH}) {
    for (double eps : {20.0, 3.5}) {
      std::size_t seen = 0;
      run_attack_with_masks(c.model, c.image, config(m, 1.0, eps, 8), masks, [&](const PerturbationState& s) {
        ++seen;
        CHECK(max_abs(s.xi) <= eps);
        if (uses_masks(m))
          for (std::size_t i = 0; i < s.xi.size(); ++i)
            if (uni.mask[i] == 0.0) CHECK(s.xi[i] == 0.0);
      });
      CHECK(seen > 0);
    }
  }
}

TEST_CASE("zero budget changes nothing") {
  const Case c = with_detections(1, 32);
  const AttackResult r = run_attack_with_masks(c.model, c.image, config(Method::ImpIfgsm, 1.0, 0.0, 5),
                                               [](const std::vector<Detection>&) { return std::vector<CropMask>{}; });
  CHECK(max_abs(r.xi) == 0.0);
  CHECK(r.removed_count() == 0);
  CHECK(r.adversarial == c.image);
}

TEST_CASE("LP differs from LIP only where gradients leak into another mask") {
  const Case c = with_detections(2, 64);
  const auto dets = detect(c.model, c.image).detections;
  const auto masks = centered_masks(c.image.shape(), dets, 7);
  const ActiveTargets t = active_targets(c.model, c.image, boxes_of(dets));
  REQUIRE(t.active_instances() == 2);
  PerturbationState lip = fresh(c.image.shape()), lp = fresh(c.image.shape());
  lip_iteration(c.model, t, masks, lip, config(Method::LipA));
  lp_iteration(c.model, t, masks, lp, config(Method::Lp));
  std::vector<Tensor> g;
  for (const auto& ids : t.per_instance) g.push_back(input_gradient(c.model, t.acts, target_cotangents(t, ids, false)));
  for (std::size_t i = 0; i < lip.xi.size(); ++i) {
    if (lip.xi[i] == lp.xi[i]) continue;
    // A difference needs a pixel inside some mask where a foreign instance's
    // gradient is nonzero.
    bool leak = false;
    for (std::size_t k = 0; k < 2; ++k)
      if (masks[k].mask[i] != 0.0 && g[1 - k][i] != 0.0) leak = true;
    CHECK(leak);
  }
}
