#include "erfattack/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <variant>

#include <json.hpp>

#include "erfattack/errors.hpp"

namespace erfattack {
namespace {

using Json = nlohmann::json;
using PathElem = std::variant<std::string, std::size_t>;
using KeyPath = std::vector<PathElem>;

struct Position {
  std::size_t line = 1;
  std::size_t column = 1;
};

Position position_of(std::string_view text, std::size_t offset) {
  Position p;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++p.line;
      p.column = 1;
    } else {
      ++p.column;
    }
  }
  return p;
}

std::string path_string(const KeyPath& path) {
  std::string out;
  for (const PathElem& e : path) {
    if (const auto* key = std::get_if<std::string>(&e)) {
      out += (out.empty() ? "" : ".") + *key;
    } else {
      out += "[" + std::to_string(std::get<std::size_t>(e)) + "]";
    }
  }
  return out.empty() ? "<root>" : out;
}

// Offset of the key (or array element) named by `path` in already-valid JSON
// text. nlohmann keeps no source positions, so this re-scans the structure.
std::optional<std::size_t> locate(std::string_view text, const KeyPath& path) {
  struct Frame {
    bool object;
    PathElem at;
    bool expect_key;
  };
  std::vector<Frame> stack;
  auto matches = [&]() {
    if (stack.size() != path.size()) return false;
    for (std::size_t i = 0; i < path.size(); ++i) {
      if (stack[i].at != path[i]) return false;
    }
    return true;
  };
  auto value_start = [&](std::size_t i) {
    return !path.empty() && !stack.empty() && !stack.back().object && matches() ? std::optional(i)
                                                                                 : std::nullopt;
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') continue;
    if (c == '{' || c == '[') {
      if (auto hit = value_start(i)) return hit;
      stack.push_back({c == '{', c == '{' ? PathElem(std::string()) : PathElem(std::size_t{0}), c == '{'});
    } else if (c == '}' || c == ']') {
      if (!stack.empty()) stack.pop_back();
    } else if (c == ',') {
      if (stack.empty()) continue;
      if (stack.back().object) {
        stack.back().expect_key = true;
      } else {
        stack.back().at = std::get<std::size_t>(stack.back().at) + 1;
      }
    } else if (c == ':') {
      if (!stack.empty()) stack.back().expect_key = false;
    } else if (c == '"') {
      const std::size_t start = i;
      std::string s;
      for (++i; i < text.size() && text[i] != '"'; ++i) {
        if (text[i] == '\\' && i + 1 < text.size()) ++i;
        s += text[i];
      }
      if (!stack.empty() && stack.back().object && stack.back().expect_key) {
        stack.back().at = s;
        if (matches()) return start;
      } else if (auto hit = value_start(start)) {
        return hit;
      }
    } else {
      if (auto hit = value_start(i)) return hit;
      while (i + 1 < text.size() && std::string_view(",]} \t\r\n").find(text[i + 1]) == std::string_view::npos) ++i;
    }
  }
  return std::nullopt;
}

class Reader {
 public:
  Reader(std::string_view text, std::string source) : text_(text), source_(std::move(source)) {}

  [[noreturn]] void fail(const KeyPath& path, const std::string& message) const {
    std::string where = source_;
    if (auto off = locate(text_, path)) {
      const Position p = position_of(text_, *off);
      where += ":" + std::to_string(p.line) + ":" + std::to_string(p.column);
    }
    throw ConfigError(where + ": " + message + " (at " + path_string(path) + ")");
  }

  // Rejects keys outside `allowed`.
  void object(const Json& j, const KeyPath& path, std::initializer_list<std::string_view> allowed) const {
    if (!j.is_object()) fail(path, "expected an object");
    for (const auto& item : j.items()) {
      bool known = false;
      for (std::string_view a : allowed) known = known || item.key() == a;
      if (!known) fail(child(path, item.key()), "unknown key '" + item.key() + "'");
    }
  }

  static KeyPath child(const KeyPath& path, PathElem e) {
    KeyPath out = path;
    out.push_back(std::move(e));
    return out;
  }

  void number(const Json& j, const KeyPath& path, double& out) const {
    if (!j.is_number()) fail(path, "expected a number");
    out = j.get<double>();
  }

  template <typename Int>
  void integer(const Json& j, const KeyPath& path, Int& out) const {
    if (!j.is_number_integer()) fail(path, "expected an integer");
    if constexpr (std::is_unsigned_v<Int>) {
      if (j.is_number_unsigned()) {
        out = static_cast<Int>(j.get<std::uint64_t>());
        return;
      }
      fail(path, "expected a non-negative integer");
    } else {
      out = static_cast<Int>(j.get<std::int64_t>());
    }
  }

  void boolean(const Json& j, const KeyPath& path, bool& out) const {
    if (!j.is_boolean()) fail(path, "expected true or false");
    out = j.get<bool>();
  }

  void string(const Json& j, const KeyPath& path, std::string& out) const {
    if (!j.is_string()) fail(path, "expected a string");
    out = j.get<std::string>();
  }

  void array(const Json& j, const KeyPath& path) const {
    if (!j.is_array()) fail(path, "expected an array");
  }

 private:
  std::string_view text_;
  std::string source_;
};

void read_paths(const Reader& r, const Json& j, const KeyPath& path, const std::filesystem::path& base,
                PathsConfig& out) {
  r.object(j, path, {"checkpoint", "profiles", "scenes", "output"});
  auto one = [&](const char* key, std::optional<std::filesystem::path>& dst) {
    if (!j.contains(key)) return;
    std::string s;
    r.string(j.at(key), Reader::child(path, key), s);
    if (s.empty()) r.fail(Reader::child(path, key), "path must not be empty");
    std::filesystem::path p(s);
    dst = p.is_absolute() || base.empty() ? p : base / p;
  };
  one("checkpoint", out.checkpoint);
  one("profiles", out.profiles);
  one("scenes", out.scenes);
  one("output", out.output);
}

void read_detector(const Reader& r, const Json& j, const KeyPath& path, DetectorConfig& out) {
  r.object(j, path, {"score_threshold", "nms_iou"});
  if (j.contains("score_threshold")) {
    const KeyPath p = Reader::child(path, "score_threshold");
    r.number(j.at("score_threshold"), p, out.score_threshold);
    if (!(out.score_threshold > 0.0 && out.score_threshold < 1.0)) r.fail(p, "must lie in (0, 1)");
  }
  if (j.contains("nms_iou")) {
    const KeyPath p = Reader::child(path, "nms_iou");
    r.number(j.at("nms_iou"), p, out.nms_iou);
    if (!(out.nms_iou >= 0.0 && out.nms_iou <= 1.0)) r.fail(p, "must lie in [0, 1]");
  }
}

void read_train(const Reader& r, const Json& j, const KeyPath& path, TrainRecipe& t, DatasetRecipe& d) {
  r.object(j, path, {"epochs", "learning_rate", "momentum", "batch_size", "negatives_per_positive",
                     "min_negatives", "min_detection_rate", "max_false_positives_per_image",
                     "train_scenes", "heldout_scenes", "image_side"});
  auto has = [&](const char* k) { return j.contains(k); };
  auto at = [&](const char* k) { return Reader::child(path, k); };
  if (has("epochs")) r.integer(j.at("epochs"), at("epochs"), t.epochs);
  if (has("learning_rate")) {
    r.number(j.at("learning_rate"), at("learning_rate"), t.learning_rate);
    if (!(t.learning_rate > 0.0)) r.fail(at("learning_rate"), "must be positive");
  }
  if (has("momentum")) {
    r.number(j.at("momentum"), at("momentum"), t.momentum);
    if (!(t.momentum >= 0.0 && t.momentum < 1.0)) r.fail(at("momentum"), "must lie in [0, 1)");
  }
  if (has("batch_size")) {
    r.integer(j.at("batch_size"), at("batch_size"), t.batch_size);
    if (t.batch_size == 0) r.fail(at("batch_size"), "must be positive");
  }
  if (has("negatives_per_positive")) r.integer(j.at("negatives_per_positive"), at("negatives_per_positive"), t.negatives_per_positive);
  if (has("min_negatives")) r.integer(j.at("min_negatives"), at("min_negatives"), t.min_negatives);
  if (has("min_detection_rate")) {
    r.number(j.at("min_detection_rate"), at("min_detection_rate"), t.min_detection_rate);
    if (!(t.min_detection_rate >= 0.0 && t.min_detection_rate <= 1.0)) r.fail(at("min_detection_rate"), "must lie in [0, 1]");
  }
  if (has("max_false_positives_per_image")) {
    r.number(j.at("max_false_positives_per_image"), at("max_false_positives_per_image"), t.max_false_positives_per_image);
    if (!(t.max_false_positives_per_image >= 0.0)) r.fail(at("max_false_positives_per_image"), "must be non-negative");
  }
  if (has("train_scenes")) r.integer(j.at("train_scenes"), at("train_scenes"), d.train_scenes);
  if (has("heldout_scenes")) {
    r.integer(j.at("heldout_scenes"), at("heldout_scenes"), d.heldout_scenes);
    if (d.heldout_scenes == 0) r.fail(at("heldout_scenes"), "must be positive");
  }
  if (has("image_side")) {
    r.integer(j.at("image_side"), at("image_side"), d.image_side);
    if (d.image_side < 64 || d.image_side % 4 != 0) r.fail(at("image_side"), "must be a multiple of 4, at least 64");
  }
}

void read_erf(const Reader& r, const Json& j, const KeyPath& path, ErfConfig& out) {
  r.object(j, path, {"samples", "energy_fraction"});
  if (j.contains("samples")) {
    r.integer(j.at("samples"), Reader::child(path, "samples"), out.samples);
    if (out.samples < 20) r.fail(Reader::child(path, "samples"), "at least 20 samples are required");
  }
  if (j.contains("energy_fraction")) {
    r.number(j.at("energy_fraction"), Reader::child(path, "energy_fraction"), out.energy_fraction);
    if (!(out.energy_fraction > 0.0 && out.energy_fraction <= 1.0)) {
      r.fail(Reader::child(path, "energy_fraction"), "must lie in (0, 1]");
    }
  }
}

void read_attack(const Reader& r, const Json& j, const KeyPath& path, AttackConfig& out) {
  r.object(j, path, {"method", "alpha", "epsilon", "max_iters"});
  if (j.contains("method")) {
    std::string name;
    r.string(j.at("method"), Reader::child(path, "method"), name);
    try {
      out.method = parse_method(name);
    } catch (const ConfigError& e) {
      r.fail(Reader::child(path, "method"), e.what());
    }
  }
  if (j.contains("alpha")) {
    r.number(j.at("alpha"), Reader::child(path, "alpha"), out.alpha);
    if (!(out.alpha > 0.0)) r.fail(Reader::child(path, "alpha"), "alpha must be positive");
  }
  if (j.contains("epsilon")) {
    r.number(j.at("epsilon"), Reader::child(path, "epsilon"), out.epsilon);
    if (!(out.epsilon >= 0.0)) r.fail(Reader::child(path, "epsilon"), "epsilon must be non-negative");
  }
  if (j.contains("max_iters")) {
    r.integer(j.at("max_iters"), Reader::child(path, "max_iters"), out.max_iters);
    if (out.max_iters == 0) r.fail(Reader::child(path, "max_iters"), "max_iters must be at least 1");
  }
}

void read_bench(const Reader& r, const Json& j, const KeyPath& path, BenchConfig& out) {
  r.object(j, path, {"methods", "n_sides", "spacings", "face_side", "scenes", "dump_images"});
  auto at = [&](const char* k) { return Reader::child(path, k); };
  if (j.contains("methods")) {
    r.array(j.at("methods"), at("methods"));
    out.methods.clear();
    for (std::size_t i = 0; i < j.at("methods").size(); ++i) {
      const KeyPath p = Reader::child(at("methods"), i);
      std::string name;
      r.string(j.at("methods")[i], p, name);
      try {
        out.methods.push_back(parse_method(name));
      } catch (const ConfigError& e) {
        r.fail(p, e.what());
      }
    }
  }
  auto int_list = [&](const char* key, std::vector<int>& dst, int min_value) {
    if (!j.contains(key)) return;
    r.array(j.at(key), at(key));
    dst.clear();
    for (std::size_t i = 0; i < j.at(key).size(); ++i) {
      const KeyPath p = Reader::child(at(key), i);
      int v = 0;
      r.integer(j.at(key)[i], p, v);
      if (v < min_value) r.fail(p, "must be at least " + std::to_string(min_value));
      dst.push_back(v);
    }
  };
  if (j.contains("face_side")) {
    r.integer(j.at("face_side"), at("face_side"), out.face_side);
    if (out.face_side < kMinGlyphSide) r.fail(at("face_side"), "must be at least 8");
  }
  int_list("n_sides", out.n_sides, 1);
  int_list("spacings", out.spacings, out.face_side);
  if (j.contains("scenes")) {
    r.integer(j.at("scenes"), at("scenes"), out.scenes);
    if (out.scenes == 0) r.fail(at("scenes"), "must be positive");
  }
  if (j.contains("dump_images")) r.boolean(j.at("dump_images"), at("dump_images"), out.dump_images);
}

}  // namespace

RunConfig parse_config_text(std::string_view text, const std::string& source,
                            const std::filesystem::path& base_dir) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    const Position p = position_of(text, e.byte > 0 ? e.byte - 1 : 0);
    std::string what = e.what();
    if (const auto cut = what.find("syntax error"); cut != std::string::npos) what = what.substr(cut);
    throw ConfigError(source + ":" + std::to_string(p.line) + ":" + std::to_string(p.column) + ": " + what);
  }
  const Reader r(text, source);
  r.object(j, {}, {"seed", "paths", "detector", "train", "erf", "attack", "bench"});
  RunConfig c;
  if (j.contains("seed")) r.integer(j.at("seed"), {"seed"}, c.seed);
  if (j.contains("paths")) read_paths(r, j.at("paths"), {"paths"}, base_dir, c.paths);
  if (j.contains("detector")) read_detector(r, j.at("detector"), {"detector"}, c.detector);
  if (j.contains("train")) read_train(r, j.at("train"), {"train"}, c.train, c.data);
  if (j.contains("erf")) read_erf(r, j.at("erf"), {"erf"}, c.erf);
  if (j.contains("attack")) read_attack(r, j.at("attack"), {"attack"}, c.attack);
  if (j.contains("bench")) read_bench(r, j.at("bench"), {"bench"}, c.bench);
  c.train.seed = c.seed;
  return c;
}

RunConfig parse_config(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + file.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), file.string(), file.parent_path());
}

SweepOptions sweep_options(const RunConfig& config) {
  SweepOptions o;
  o.methods = config.bench.methods;
  o.n_sides = config.bench.n_sides;
  o.spacings = config.bench.spacings;
  o.face_side = config.bench.face_side;
  o.scenes = config.bench.scenes;
  o.seed = config.seed;
  o.attack = config.attack;
  return o;
}

}  // namespace erfattack
