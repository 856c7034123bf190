// Command-line front end: train / detect / erf / attack / bench.
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "erfattack/bench.hpp"
#include "erfattack/checkpoint.hpp"
#include "erfattack/config.hpp"
#include "erfattack/errors.hpp"
#include "erfattack/erf.hpp"
#include "erfattack/pgm.hpp"
#include "erfattack/synth.hpp"
#include "erfattack/train.hpp"

namespace fs = std::filesystem;
using namespace erfattack;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kIo = 3, kTraining = 4, kNumeric = 5 };

int report(const char* kind, const std::string& message, int code) {
  // One line of JSON on stderr so scripts can parse failures.
  nlohmann::json j{{"error", kind}, {"message", message}};
  std::cerr << j.dump() << std::endl;
  return code;
}

RunConfig load_config(const std::string& path) {
  return path.empty() ? RunConfig{} : parse_config(path);
}

fs::path require_existing(const std::optional<fs::path>& flag, const std::optional<fs::path>& from_config,
                          const char* what) {
  const std::optional<fs::path> p = flag ? flag : from_config;
  if (!p) throw ConfigError(std::string("missing required path: ") + what);
  if (!fs::exists(*p)) throw IoError(std::string(what) + " not found: " + p->string());
  return *p;
}

fs::path require_output(const std::optional<fs::path>& flag, const std::optional<fs::path>& from_config,
                        const char* what) {
  const std::optional<fs::path> p = flag ? flag : from_config;
  if (!p) throw ConfigError(std::string("missing required path: ") + what);
  return *p;
}

DetectorModel load_model(const fs::path& ckpt, const RunConfig& cfg) {
  DetectorModel model;
  model.graph = load_checkpoint(ckpt);
  model.score_threshold = cfg.detector.score_threshold;
  model.nms_iou = cfg.detector.nms_iou;
  model.validate();
  return model;
}

std::optional<fs::path> opt_path(const std::string& s) {
  return s.empty() ? std::nullopt : std::optional<fs::path>(s);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

// The input image: a PGM file, or a scene description rendered on the fly.
Tensor load_input(const std::string& image, const std::string& scene, const RunConfig& cfg) {
  if (!image.empty() && !scene.empty()) throw ConfigError("give either --image or --scene, not both");
  if (!image.empty()) return load_pgm(require_existing(opt_path(image), std::nullopt, "image"));
  return render_scene(load_scene(require_existing(opt_path(scene), cfg.paths.scenes, "--image or --scene")));
}

struct Common {
  std::string config;
  std::string ckpt;
  std::optional<std::uint64_t> seed;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = load_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.train.seed = *c.seed;
  }
  return cfg;
}

int run_train(const Common& c, const std::string& out_flag) {
  const RunConfig cfg = resolve(c);
  const fs::path out = require_output(opt_path(out_flag), cfg.paths.checkpoint, "--out checkpoint");
  const TrainedDetector t = train_default(cfg.seed, cfg.train, cfg.data);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_checkpoint(out, t.model.graph);
  std::printf("epochs %zu detection_rate %.4f false_positives_per_image %.4f checkpoint %s\n",
              t.result.epochs_run, t.result.heldout.detection_rate(),
              t.result.heldout.false_positives_per_image(), out.string().c_str());
  return kOk;
}

int run_detect(const Common& c, const std::string& image_path, const std::string& scene_path) {
  const RunConfig cfg = resolve(c);
  const DetectorModel model = load_model(require_existing(opt_path(c.ckpt), cfg.paths.checkpoint, "checkpoint"), cfg);
  const Tensor image = load_input(image_path, scene_path, cfg);
  for (const Detection& d : detect(model, image).detections) {
    std::printf("%d %g %g %g %.4f\n", d.scale_index, d.box.cx, d.box.cy, d.box.side, d.score);
  }
  return kOk;
}

std::vector<ErfProfile> profiles_for(const DetectorModel& model, const RunConfig& cfg) {
  std::vector<ErfProfile> profiles;
  for (std::size_t s = 0; s < model.num_scales(); ++s) {
    const ErfSamples samples = erf_samples(model, static_cast<int>(s), cfg.erf.samples, cfg.seed);
    profiles.push_back(estimate_erf(model, static_cast<int>(s), samples.images, samples.center_row,
                                    samples.center_col, cfg.erf.energy_fraction));
  }
  return profiles;
}

int run_erf(const Common& c, const std::string& out_flag, std::optional<std::size_t> samples) {
  RunConfig cfg = resolve(c);
  if (samples) {
    if (*samples < 20) throw ConfigError("--samples must be at least 20");
    cfg.erf.samples = *samples;
  }
  const DetectorModel model = load_model(require_existing(opt_path(c.ckpt), cfg.paths.checkpoint, "checkpoint"), cfg);
  const fs::path out = require_output(opt_path(out_flag), cfg.paths.profiles, "--out directory");
  for (const ErfProfile& p : profiles_for(model, cfg)) {
    write_profile(out, p);
    const RadialReport r = radial_decay_check(p);
    std::printf("scale %d trf %zu crop %zu max_ring_increase %.4f\n", p.scale_index, p.trf_side,
                p.crop_side, r.max_violation);
  }
  return kOk;
}

struct AttackFlags {
  std::string profiles, image, scene, method, out;
  std::optional<double> alpha, epsilon;
  std::optional<std::size_t> max_iters;
};

int run_attack_cmd(const Common& c, const AttackFlags& f) {
  RunConfig cfg = resolve(c);
  if (!f.method.empty()) cfg.attack.method = parse_method(f.method);
  if (f.alpha) cfg.attack.alpha = *f.alpha;
  if (f.epsilon) cfg.attack.epsilon = *f.epsilon;
  if (f.max_iters) cfg.attack.max_iters = *f.max_iters;
  cfg.attack.validate();
  const DetectorModel model = load_model(require_existing(opt_path(c.ckpt), cfg.paths.checkpoint, "checkpoint"), cfg);
  const Tensor image = load_input(f.image, f.scene, cfg);
  const fs::path out = require_output(opt_path(f.out), cfg.paths.output, "--out directory");
  std::vector<ErfProfile> profiles;
  if (uses_masks(cfg.attack.method)) {
    profiles = read_profiles(require_existing(opt_path(f.profiles), cfg.paths.profiles, "profile directory"),
                             model.num_scales());
  }
  const AttackResult r = run_attack(model, image, cfg.attack, profiles);

  fs::create_directories(out);
  save_pgm(out / "adversarial.pgm", r.adversarial);
  std::ostringstream csv;
  csv << std::setprecision(17);
  for (std::size_t y = 0; y < r.xi.dim(1); ++y) {
    for (std::size_t x = 0; x < r.xi.dim(2); ++x) csv << (x ? "," : "") << r.xi.at(0, y, x);
    csv << '\n';
  }
  write_text(out / "perturbation.csv", csv.str());

  nlohmann::ordered_json j;
  j["method"] = method_name(cfg.attack.method);
  j["alpha"] = cfg.attack.alpha;
  j["epsilon"] = cfg.attack.epsilon;
  j["max_iters"] = cfg.attack.max_iters;
  j["iterations"] = r.iterations;
  j["stalled"] = r.stalled;
  j["active_targets"] = r.active_counts;
  nlohmann::ordered_json instances = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.originals.size(); ++i) {
    const Detection& d = r.originals[i];
    instances.push_back({{"scale_index", d.scale_index},
                         {"x", d.box.cx},
                         {"y", d.box.cy},
                         {"side", d.box.side},
                         {"score", d.score},
                         {"outcome", r.removed[i] ? "removed" : "survived"}});
  }
  j["instances"] = instances;
  j["detected"] = r.originals.size();
  j["removed"] = r.removed_count();
  j["attack_success_rate"] = r.originals.empty()
                                 ? nlohmann::ordered_json(nullptr)
                                 : nlohmann::ordered_json(double(r.removed_count()) / double(r.originals.size()));
  write_text(out / "result.json", j.dump(2) + "\n");
  std::printf("detected %zu removed %zu iterations %zu\n", r.originals.size(), r.removed_count(), r.iterations);
  return kOk;
}

int run_bench(const Common& c, const std::string& out_flag, const std::string& profiles_flag) {
  const RunConfig cfg = resolve(c);
  const DetectorModel model = load_model(require_existing(opt_path(c.ckpt), cfg.paths.checkpoint, "checkpoint"), cfg);
  const fs::path out = require_output(opt_path(out_flag), cfg.paths.output, "--out directory");
  const std::optional<fs::path> pdir = profiles_flag.empty() ? cfg.paths.profiles : opt_path(profiles_flag);
  std::vector<ErfProfile> profiles;
  if (pdir) {
    profiles = read_profiles(require_existing(pdir, std::nullopt, "profile directory"), model.num_scales());
  } else {
    profiles = profiles_for(model, cfg);
  }
  SweepOptions options = sweep_options(cfg);
  if (cfg.bench.dump_images) options.dump_dir = out / "adversarial";
  fs::create_directories(out);
  const SweepReport report = run_sweep(model, profiles, options);
  std::ostringstream csv, json;
  write_csv(csv, report);
  write_json(json, report, options);
  write_text(out / "sweep.csv", csv.str());
  write_text(out / "sweep.json", json.str());
  for (const ConditionSummary& s : report.summary) {
    const auto rate = s.totals.success_rate();
    std::printf("%-12s N=%-3d spacing=%-3d success=%s\n", method_name(s.method), s.n_side * s.n_side,
                s.spacing, rate ? std::to_string(*rate).c_str() : "na");
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Localized instance perturbation attacks on a multi-scale detector"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub, bool ckpt) {
    sub->add_option("--config", common.config, "JSON run configuration");
    sub->add_option("--seed", common.seed, "Seed overriding the config");
    if (ckpt) sub->add_option("--ckpt", common.ckpt, "Model checkpoint");
  };

  std::string train_out;
  CLI::App* train = app.add_subcommand("train", "Train the detector on synthetic scenes");
  add_common(train, false);
  train->add_option("--out", train_out, "Checkpoint to write");

  std::string detect_image, detect_scene;
  CLI::App* det = app.add_subcommand("detect", "Print detections: scale_index x y side score");
  add_common(det, true);
  det->add_option("--image", detect_image, "PGM (P5) image");
  det->add_option("--scene", detect_scene, "Scene description to render instead of an image");

  std::string erf_out;
  std::optional<std::size_t> erf_samples_flag;
  CLI::App* erf = app.add_subcommand("erf", "Estimate per-head effective receptive fields");
  add_common(erf, true);
  erf->add_option("--out", erf_out, "Profile directory");
  erf->add_option("--samples", erf_samples_flag, "Sample images per head (>= 20)");

  AttackFlags af;
  CLI::App* atk = app.add_subcommand("attack", "Attack one image");
  add_common(atk, true);
  atk->add_option("--profiles", af.profiles, "Profile directory from `erf`");
  atk->add_option("--image", af.image, "PGM (P5) image");
  atk->add_option("--scene", af.scene, "Scene description to render instead of an image");
  atk->add_option("--method", af.method, "imp-ifgsm | imp-deepfool | lp | lip-a | lip-h");
  atk->add_option("--alpha", af.alpha, "Step size in pixel units");
  atk->add_option("--epsilon", af.epsilon, "Perturbation bound in pixel units");
  atk->add_option("--max-iters", af.max_iters, "Iteration cap");
  atk->add_option("--out", af.out, "Output directory");

  std::string bench_out, bench_profiles;
  CLI::App* bench = app.add_subcommand("bench", "Run the grid sweep");
  add_common(bench, true);
  bench->add_option("--out", bench_out, "Output directory");
  bench->add_option("--profiles", bench_profiles, "Profile directory (estimated when absent)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("usage", e.what(), kUsage);
  }

  try {
    if (*train) return run_train(common, train_out);
    if (*det) return run_detect(common, detect_image, detect_scene);
    if (*erf) return run_erf(common, erf_out, erf_samples_flag);
    if (*atk) return run_attack_cmd(common, af);
    if (*bench) return run_bench(common, bench_out, bench_profiles);
  } catch (const ConfigError& e) {
    return report("config", e.what(), kUsage);
  } catch (const IoError& e) {
    return report("io", e.what(), kIo);
  } catch (const TrainingFailed& e) {
    return report("training_failed", e.what(), kTraining);
  } catch (const DegenerateProfile& e) {
    return report("degenerate_profile", e.what(), kNumeric);
  } catch (const NumericError& e) {
    return report("numeric", e.what(), kNumeric);
  } catch (const std::exception& e) {
    return report("internal", e.what(), kFailure);
  }
  return kFailure;
}
