#include "erfattack/bench.hpp"

#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "erfattack/errors.hpp"
#include "erfattack/parallel.hpp"
#include "erfattack/pgm.hpp"

namespace erfattack {
namespace {

std::size_t matched_count(std::span<const Box> predicted, std::span<const Box> reference) {
  const std::vector<int> m = match_boxes(predicted, reference, 0.3);
  return static_cast<std::size_t>(std::count_if(m.begin(), m.end(), [](int v) { return v >= 0; }));
}

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "na";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

nlohmann::ordered_json json_rate(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

void add(Metrics& into, const Metrics& m) {
  into.faces += m.faces;
  into.detected_before += m.detected_before;
  into.removed += m.removed;
  into.truth_before += m.truth_before;
  into.truth_after += m.truth_after;
}

}  // namespace

void GridSpec::validate() const {
  if (face_side < kMinGlyphSide) throw ConfigError("face side must be at least 8");
  if (n_side < 1) throw ConfigError("n_side must be at least 1");
  if (spacing < face_side) throw ConfigError("spacing must be at least the face side");
  if (margin < 0) throw ConfigError("margin must be non-negative");
}

GridScene make_grid(const GridSpec& spec, int stride) {
  spec.validate();
  const std::size_t extent = static_cast<std::size_t>((spec.n_side - 1) * spec.spacing + spec.face_side);
  std::size_t side = extent + 2 * static_cast<std::size_t>(spec.margin);
  side = (side + stride - 1) / stride * stride;
  GridScene g;
  g.scene = {side, side, spec.seed, {}};
  const Tensor glyph = render_glyph(spec.face_side, derive_seed(spec.seed, 0));
  g.image = noise_background(side, side, spec.seed);
  for (int r = 0; r < spec.n_side; ++r) {
    for (int c = 0; c < spec.n_side; ++c) {
      const std::size_t left = spec.margin + c * spec.spacing, top = spec.margin + r * spec.spacing;
      paste(g.image, glyph, left, top);
      g.scene.faces.push_back({left + spec.face_side / 2.0, top + spec.face_side / 2.0, spec.face_side});
    }
  }
  g.scene.validate();
  return g;
}

int spacing_for(int face_side, double multiple) {
  return static_cast<int>(std::lround(face_side * multiple));
}

std::optional<double> Metrics::success_rate() const { return ratio(removed, detected_before); }
std::optional<double> Metrics::detection_rate_before() const { return ratio(truth_before, faces); }
std::optional<double> Metrics::detection_rate_after() const { return ratio(truth_after, faces); }

Metrics compute_metrics(std::span<const Box> before, std::span<const Box> after,
                        std::span<const Box> ground_truth) {
  Metrics m;
  m.faces = ground_truth.size();
  m.detected_before = before.size();
  m.removed = before.size() - matched_count(after, before);
  m.truth_before = matched_count(before, ground_truth);
  m.truth_after = matched_count(after, ground_truth);
  return m;
}

std::optional<double> SweepReport::success(Method method, int n_side, int spacing) const {
  for (const ConditionSummary& s : summary) {
    if (s.method == method && s.n_side == n_side && s.spacing == spacing) return s.totals.success_rate();
  }
  throw ConfigError("condition not in report");
}

SweepReport run_sweep(const DetectorModel& model, std::span<const ErfProfile> profiles,
                      const SweepOptions& options) {
  options.attack.validate();
  struct Job {
    Method method;
    int n_side, spacing;
    std::size_t scene;
  };
  std::vector<Job> jobs;
  for (Method m : options.methods) {
    for (int n : options.n_sides) {
      for (int sp : options.spacings) {
        GridSpec{options.face_side, n, sp, 16, 0}.validate();
        for (std::size_t k = 0; k < options.scenes; ++k) jobs.push_back({m, n, sp, k});
      }
    }
  }
  if (options.dump_dir) std::filesystem::create_directories(*options.dump_dir);

  SweepReport report;
  report.records.resize(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t j) {
    const Job& job = jobs[j];
    const std::uint64_t seed = derive_seed(options.seed, job.scene);
    const GridScene grid = make_grid({options.face_side, job.n_side, job.spacing, 16, seed}, model.stride);
    AttackConfig cfg = options.attack;
    cfg.method = job.method;
    const AttackResult r = run_attack(model, grid.image, cfg, profiles);
    std::vector<Box> truth;
    for (const FacePlacement& f : grid.scene.faces) truth.push_back({f.cx, f.cy, double(f.side)});
    SceneRecord& rec = report.records[j];
    rec = {job.method, job.n_side, job.spacing, job.scene, seed,
           compute_metrics(boxes_of(r.originals), boxes_of(r.final_detections), truth),
           r.iterations, r.stalled};
    if (options.dump_dir && job.scene == 0) {
      save_pgm(*options.dump_dir / (std::string(method_name(job.method)) + "_n" +
                                    std::to_string(job.n_side) + "_s" +
                                    std::to_string(job.spacing) + ".pgm"),
               r.adversarial);
    }
  });

  // Jobs were generated in condition-then-scene order, so records already are.
  for (std::size_t j = 0; j < report.records.size();) {
    const SceneRecord& first = report.records[j];
    ConditionSummary s{first.method, first.n_side, first.spacing, 0, {}, 0.0};
    for (; j < report.records.size() && report.records[j].method == s.method &&
           report.records[j].n_side == s.n_side && report.records[j].spacing == s.spacing;
         ++j) {
      add(s.totals, report.records[j].metrics);
      s.mean_iterations += static_cast<double>(report.records[j].iterations);
      ++s.scenes;
    }
    s.mean_iterations /= static_cast<double>(s.scenes);
    report.summary.push_back(s);
  }
  return report;
}

void write_csv(std::ostream& out, const SweepReport& report) {
  out << "row,method,n_faces,spacing,scene,seed,detected_before,removed,attack_success_rate,"
         "detection_rate_before,detection_rate_after,iterations,stalled\n";
  for (const SceneRecord& r : report.records) {
    const Metrics& m = r.metrics;
    out << "scene," << method_name(r.method) << ',' << r.n_side * r.n_side << ',' << r.spacing << ','
        << r.scene_index << ',' << r.scene_seed << ',' << m.detected_before << ',' << m.removed << ','
        << fmt(m.success_rate()) << ',' << fmt(m.detection_rate_before()) << ','
        << fmt(m.detection_rate_after()) << ',' << r.iterations << ',' << (r.stalled ? 1 : 0) << '\n';
  }
  for (const ConditionSummary& s : report.summary) {
    const Metrics& m = s.totals;
    char iters[32];
    std::snprintf(iters, sizeof iters, "%.3f", s.mean_iterations);
    out << "aggregate," << method_name(s.method) << ',' << s.n_side * s.n_side << ',' << s.spacing
        << ",all," << s.scenes << ',' << m.detected_before << ',' << m.removed << ','
        << fmt(m.success_rate()) << ',' << fmt(m.detection_rate_before()) << ','
        << fmt(m.detection_rate_after()) << ',' << iters << ",\n";
  }
}

void write_json(std::ostream& out, const SweepReport& report, const SweepOptions& options) {
  nlohmann::ordered_json j;
  j["seed"] = options.seed;
  j["scenes_per_condition"] = options.scenes;
  j["face_side"] = options.face_side;
  j["attack"] = {{"alpha", options.attack.alpha},
                 {"epsilon", options.attack.epsilon},
                 {"max_iters", options.attack.max_iters}};
  nlohmann::ordered_json seeds = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < options.scenes; ++k) seeds.push_back(derive_seed(options.seed, k));
  j["scene_seeds"] = seeds;
  nlohmann::ordered_json conditions = nlohmann::ordered_json::array();
  for (const ConditionSummary& s : report.summary) {
    const Metrics& m = s.totals;
    conditions.push_back({{"method", method_name(s.method)},
                          {"n_faces", s.n_side * s.n_side},
                          {"spacing", s.spacing},
                          {"scenes", s.scenes},
                          {"detected_before", m.detected_before},
                          {"removed", m.removed},
                          {"attack_success_rate", json_rate(m.success_rate())},
                          {"detection_rate_before", json_rate(m.detection_rate_before())},
                          {"detection_rate_after", json_rate(m.detection_rate_after())},
                          {"mean_iterations", s.mean_iterations}});
  }
  j["conditions"] = conditions;
  nlohmann::ordered_json scenes = nlohmann::ordered_json::array();
  for (const SceneRecord& r : report.records) {
    const Metrics& m = r.metrics;
    scenes.push_back({{"method", method_name(r.method)},
                      {"n_faces", r.n_side * r.n_side},
                      {"spacing", r.spacing},
                      {"scene", r.scene_index},
                      {"seed", r.scene_seed},
                      {"detected_before", m.detected_before},
                      {"removed", m.removed},
                      {"attack_success_rate", json_rate(m.success_rate())},
                      {"iterations", r.iterations},
                      {"stalled", r.stalled}});
  }
  j["scenes"] = scenes;
  out << j.dump(2) << '\n';
}

}  // namespace erfattack
