#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "erfattack/checkpoint.hpp"
#include "erfattack/config.hpp"
#include "erfattack/errors.hpp"
#include "erfattack/pgm.hpp"
#include "erfattack/synth.hpp"

using namespace erfattack;
namespace fs = std::filesystem;

namespace {

std::string config_error(std::string_view text) {
  try {
    parse_config_text(text, "cfg.json");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

struct Run {
  int code;
  std::string out;
};

// Runs the CLI with stderr folded into the captured output.
Run cli(const std::string& args) {
  const std::string cmd = std::string(ERFATTACK_CLI) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::string out;
  std::array<char, 512> buf;
  while (fgets(buf.data(), buf.size(), p)) out += buf.data();
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

fs::path scratch_dir(const char* name) {
  const fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("empty config gives all defaults") {
  const RunConfig c = parse_config_text("{}");
  CHECK(c.seed == 17);
  CHECK(c.attack.epsilon == 20.0);
  CHECK(c.attack.alpha == 1.0);
  CHECK(c.attack.max_iters == 40);
  CHECK(c.attack.target_label == -1.0);
  CHECK(c.detector.score_threshold == 0.5);
  CHECK(c.detector.nms_iou == 0.1);
  CHECK(c.erf.samples == 20);
  CHECK(c.erf.energy_fraction == 0.9);
  CHECK(c.bench.n_sides == std::vector<int>{1, 2, 3, 4});
  CHECK(c.bench.spacings == std::vector<int>{29, 48, 72});
  CHECK(c.bench.methods.size() == 5);
  CHECK(!c.paths.checkpoint.has_value());
}

TEST_CASE("attack constants") {
  const RunConfig c = parse_config_text(R"({"attack":{"epsilon":20,"max_iters":40}})");
  CHECK(c.attack.epsilon == 20.0);
  CHECK(c.attack.max_iters == 40);
  const RunConfig d = parse_config_text(R"({"attack":{"method":"imp-deepfool","alpha":0.5}, "seed": 3})");
  CHECK(d.attack.method == Method::ImpDeepfool);
  CHECK(d.attack.alpha == 0.5);
  CHECK(d.train.seed == 3);
}

TEST_CASE("config validation errors carry location and key") {
  const std::string neg = config_error(R"({"attack":{"alpha":-1}})");
  CHECK(neg.find("cfg.json:1:") == 0);
  CHECK(neg.find("attack.alpha") != std::string::npos);

  const std::string unknown = config_error("{\n  \"attack\": {\n    \"epsilonn\": 3\n  }\n}");
  CHECK(unknown.find("cfg.json:3:5") == 0);
  CHECK(unknown.find("unknown key 'epsilonn'") != std::string::npos);

  const std::string type = config_error(R"({"bench":{"n_sides":[1,"two"]}})");
  CHECK(type.find("bench.n_sides[1]") != std::string::npos);

  const std::string syntax = config_error("{\n\"seed\": 3,,\n}");
  CHECK(syntax.find("cfg.json:2:") == 0);
  CHECK(syntax.find("syntax") != std::string::npos);

  CHECK(!config_error(R"({"erf":{"samples":5}})").empty());
  CHECK(!config_error(R"({"attack":{"method":"fgsm"}})").empty());
  CHECK(!config_error(R"({"detector":{"score_threshold":1.5}})").empty());
  CHECK(!config_error(R"({"bench":{"face_side":24,"spacings":[20]}})").empty());
  CHECK(!config_error(R"([1,2])").empty());
}

TEST_CASE("config paths resolve against the file's directory") {
  const fs::path dir = scratch_dir("erfattack_config_test");
  std::ofstream(dir / "run.json") << R"({"paths":{"checkpoint":"m.ckpt","output":"/abs/out"}})";
  const RunConfig c = parse_config(dir / "run.json");
  CHECK(*c.paths.checkpoint == dir / "m.ckpt");
  CHECK(*c.paths.output == fs::path("/abs/out"));
  CHECK_THROWS_AS(parse_config(dir / "missing.json"), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("sweep options follow the bench section") {
  const RunConfig c = parse_config_text(R"({"seed":5,"bench":{"methods":["lp"],"scenes":3},"attack":{"epsilon":8}})");
  const SweepOptions o = sweep_options(c);
  CHECK(o.methods == std::vector<Method>{Method::Lp});
  CHECK(o.scenes == 3);
  CHECK(o.seed == 5);
  CHECK(o.attack.epsilon == 8.0);
}

TEST_CASE("PGM byte layout") {
  const Tensor img({1, 2, 2}, std::vector<double>{0, 255, 128, 64});
  std::ostringstream out;
  write_pgm(out, img);
  const std::string bytes = out.str();
  CHECK(bytes.size() == 15);
  CHECK(bytes.substr(0, 11) == "P5\n2 2\n255\n");
  CHECK(bytes.substr(11) == std::string("\x00\xff\x80\x40", 4));
  std::istringstream in(bytes);
  CHECK(read_pgm(in) == img);
}

TEST_CASE("PGM round trip and rejection") {
  const Tensor img = noise_background(13, 7, 3);
  std::ostringstream out;
  write_pgm(out, img);
  std::istringstream in(out.str());
  CHECK(read_pgm(in) == img);

  std::istringstream p6("P6\n2 2\n255\n" + std::string(12, 'a'));
  CHECK_THROWS_AS(read_pgm(p6), IoError);
  std::istringstream truncated(out.str().substr(0, out.str().size() - 1));
  CHECK_THROWS_AS(read_pgm(truncated), IoError);
  std::istringstream bad_header("P5\n2 x\n255\n1234");
  CHECK_THROWS_AS(read_pgm(bad_header), IoError);
  std::istringstream maxval("P5\n2 2\n65535\n12345678");
  CHECK_THROWS_AS(read_pgm(maxval), IoError);
  std::istringstream comment("P5\n# made by hand\n2 1\n255\nAB");
  CHECK(read_pgm(comment) == Tensor({1, 1, 2}, std::vector<double>{65, 66}));
  CHECK_THROWS_AS(load_pgm("/nonexistent/x.pgm"), IoError);
}

TEST_CASE("scene text round trip") {
  const SceneSpec s{64, 48, 99, {{20, 20, 24}, {44.5, 30.5, 13}}};
  const std::string text = format_scene(s);
  CHECK(parse_scene(text) == s);
  CHECK(parse_scene("# comment\nsize 32 32\nseed 4\n\nface 16 16 12\n") == SceneSpec{32, 32, 4, {{16, 16, 12}}});
  CHECK_THROWS_AS(parse_scene("size 32 32\nface 16 16\n"), IoError);
  CHECK_THROWS_AS(parse_scene("size 32 32\nblob 1\n"), IoError);
  CHECK_THROWS_AS(parse_scene("seed 3\n"), IoError);
  // Faces must sit inside the image.
  CHECK_THROWS_AS(parse_scene("size 32 32\nface 30 16 12\n"), IoError);
}

TEST_CASE("rendered scenes are deterministic") {
  const SceneSpec s{64, 64, 5, {{32, 32, 24}}};
  const Tensor a = render_scene(s);
  CHECK(a == render_scene(s));
  SceneSpec t = s;
  t.seed = 6;
  CHECK(!(a == render_scene(t)));
  // The glyph occupies its box: the center is much brighter than a corner patch.
  CHECK(a.at(0, 32, 32) > 0.0);
}

TEST_CASE("CLI errors are single JSON lines with nonzero exit") {
  const Run none = cli("");
  CHECK(none.code != 0);
  CHECK(none.out.find("{\"error\":\"usage\"") == 0);
  CHECK(std::count(none.out.begin(), none.out.end(), '\n') == 1);

  const Run missing = cli("detect --ckpt /nonexistent/model.ckpt --image /nonexistent/x.pgm");
  CHECK(missing.code == 3);
  CHECK(missing.out.find("{\"error\":\"io\"") == 0);
  CHECK(std::count(missing.out.begin(), missing.out.end(), '\n') == 1);

  const fs::path dir = scratch_dir("erfattack_cli_test");
  std::ofstream(dir / "bad.json") << R"({"attack":{"alpha":-1}})";
  const Run bad = cli("bench --config " + (dir / "bad.json").string() + " --out " + (dir / "out").string());
  CHECK(bad.code == 2);
  CHECK(bad.out.find("{\"error\":\"config\"") == 0);
  CHECK(bad.out.find("attack.alpha") != std::string::npos);
  CHECK(!fs::exists(dir / "out"));

  const Run method = cli("attack --ckpt x --image y --method nope --out " + dir.string());
  CHECK(method.code == 2);
  CHECK(cli("--help").code == 0);
  fs::remove_all(dir);
}

TEST_CASE("CLI detect on an untrained checkpoint") {
  const fs::path dir = scratch_dir("erfattack_cli_detect");
  save_checkpoint(dir / "zero.ckpt", make_zero_detector().graph);
  save_pgm(dir / "img.pgm", noise_background(32, 32, 1));
  const Run r = cli("detect --ckpt " + (dir / "zero.ckpt").string() + " --image " + (dir / "img.pgm").string());
  CHECK(r.code == 0);
  CHECK(r.out.empty());
  const Run a = cli("attack --ckpt " + (dir / "zero.ckpt").string() + " --image " + (dir / "img.pgm").string() +
                    " --method imp-ifgsm --out " + (dir / "atk").string());
  CHECK(a.code == 0);
  CHECK(fs::exists(dir / "atk" / "adversarial.pgm"));
  CHECK(fs::exists(dir / "atk" / "perturbation.csv"));
  std::ifstream res(dir / "atk" / "result.json");
  const std::string json((std::istreambuf_iterator<char>(res)), {});
  CHECK(json.find("\"attack_success_rate\": null") != std::string::npos);
  fs::remove_all(dir);
}
