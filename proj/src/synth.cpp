#include "erfattack/synth.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "erfattack/errors.hpp"

namespace erfattack {

std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index) {
  // splitmix64 finalizer over a combination of both inputs
  std::uint64_t z = parent + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo + 1);
  return lo + static_cast<int>(rng() % span);
}

namespace {

constexpr int kBackgroundLevel = 60;
constexpr int kBackgroundSpread = 80;
constexpr int kDiscLevel = 200;
constexpr int kFeatureLevel = 45;
constexpr int kForegroundJitter = 12;

double background_pixel(std::mt19937_64& rng) {
  return kBackgroundLevel + static_cast<double>(rng() % (kBackgroundSpread + 1));
}

double jittered(std::mt19937_64& rng, int level) {
  return level + static_cast<double>(rng() % (2 * kForegroundJitter + 1)) - kForegroundJitter;
}

bool is_integral(double v) { return std::abs(v - std::round(v)) < 1e-9; }

}  // namespace

GlyphLayout glyph_layout(int side) {
  const double s = side;
  return {0.46 * s, 0.19 * s, -0.12 * s, 0.085 * s, 0.2 * s, 0.2 * s, 0.055 * s};
}

GlyphPart glyph_part(const GlyphLayout& g, double dx, double dy) {
  if (dx * dx + dy * dy > g.disc_radius * g.disc_radius) return GlyphPart::Background;
  for (double ex : {-g.eye_dx, g.eye_dx}) {
    const double ux = dx - ex, uy = dy - g.eye_dy;
    if (ux * ux + uy * uy <= g.eye_radius * g.eye_radius) return GlyphPart::Eye;
  }
  if (std::abs(dx) <= g.mouth_half_width && std::abs(dy - g.mouth_dy) <= g.mouth_half_height) {
    return GlyphPart::Mouth;
  }
  return GlyphPart::Disc;
}

Tensor render_glyph(int side, std::uint64_t seed) {
  if (side < kMinGlyphSide) {
    throw ConfigError("glyph side " + std::to_string(side) + " below minimum " +
                      std::to_string(kMinGlyphSide));
  }
  const GlyphLayout layout = glyph_layout(side);
  std::mt19937_64 rng(seed);
  Tensor patch({1, static_cast<std::size_t>(side), static_cast<std::size_t>(side)});
  const double c = side / 2.0;
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      double v = 0.0;
      switch (glyph_part(layout, x + 0.5 - c, y + 0.5 - c)) {
        case GlyphPart::Background: v = background_pixel(rng); break;
        case GlyphPart::Disc: v = jittered(rng, kDiscLevel); break;
        case GlyphPart::Eye:
        case GlyphPart::Mouth: v = jittered(rng, kFeatureLevel); break;
      }
      patch.at(0, y, x) = v;
    }
  }
  return patch;
}

Tensor noise_background(std::size_t width, std::size_t height, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor image({1, height, width});
  for (double& v : image.data()) v = background_pixel(rng);
  return image;
}

void paste(Tensor& image, const Tensor& patch, std::size_t x0, std::size_t y0) {
  const std::size_t ph = patch.dim(1), pw = patch.dim(2);
  if (y0 + ph > image.dim(1) || x0 + pw > image.dim(2)) {
    throw ConfigError("patch does not fit inside the image");
  }
  for (std::size_t y = 0; y < ph; ++y) {
    for (std::size_t x = 0; x < pw; ++x) image.at(0, y0 + y, x0 + x) = patch.at(0, y, x);
  }
}

std::size_t FacePlacement::left() const {
  return static_cast<std::size_t>(std::llround(cx - side / 2.0));
}
std::size_t FacePlacement::top() const {
  return static_cast<std::size_t>(std::llround(cy - side / 2.0));
}

void SceneSpec::validate() const {
  if (width == 0 || height == 0) throw ConfigError("scene size must be positive");
  for (std::size_t i = 0; i < faces.size(); ++i) {
    const FacePlacement& f = faces[i];
    const std::string id = "face " + std::to_string(i);
    if (f.side < kMinGlyphSide) throw ConfigError(id + ": side below minimum");
    const double x0 = f.cx - f.side / 2.0, y0 = f.cy - f.side / 2.0;
    if (!is_integral(x0) || !is_integral(y0)) {
      throw ConfigError(id + ": box corner must fall on the pixel grid");
    }
    if (x0 < 0 || y0 < 0 || x0 + f.side > static_cast<double>(width) ||
        y0 + f.side > static_cast<double>(height)) {
      throw ConfigError(id + ": box leaves the image");
    }
  }
}

Tensor render_scene(const SceneSpec& scene) {
  scene.validate();
  Tensor image = noise_background(scene.width, scene.height, scene.seed);
  for (std::size_t i = 0; i < scene.faces.size(); ++i) {
    const FacePlacement& f = scene.faces[i];
    paste(image, render_glyph(f.side, derive_seed(scene.seed, i)), f.left(), f.top());
  }
  return image;
}

std::string format_scene(const SceneSpec& scene) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "size " << scene.width << ' ' << scene.height << '\n';
  out << "seed " << scene.seed << '\n';
  for (const FacePlacement& f : scene.faces) {
    out << "face " << f.cx << ' ' << f.cy << ' ' << f.side << '\n';
  }
  return out.str();
}

SceneSpec parse_scene(std::string_view text) {
  SceneSpec scene;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  bool have_size = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream fields(line);
    std::string key;
    if (!(fields >> key)) continue;
    auto fail = [&](const std::string& why) {
      return IoError("scene line " + std::to_string(line_no) + ": " + why);
    };
    if (key == "size") {
      if (!(fields >> scene.width >> scene.height)) throw fail("expected 'size <w> <h>'");
      have_size = true;
    } else if (key == "seed") {
      if (!(fields >> scene.seed)) throw fail("expected 'seed <n>'");
    } else if (key == "face") {
      FacePlacement f;
      if (!(fields >> f.cx >> f.cy >> f.side)) throw fail("expected 'face <cx> <cy> <side>'");
      scene.faces.push_back(f);
    } else {
      throw fail("unknown directive '" + key + "'");
    }
    std::string extra;
    if (fields >> extra) throw fail("trailing field '" + extra + "'");
  }
  if (!have_size) throw IoError("scene has no size line");
  try {
    scene.validate();
  } catch (const ConfigError& e) {
    throw IoError(std::string("invalid scene: ") + e.what());
  }
  return scene;
}

SceneSpec load_scene(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scene " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_scene(buf.str());
}

void save_scene(const std::filesystem::path& path, const SceneSpec& scene) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write scene " + path.string());
  out << format_scene(scene);
}

}  // namespace erfattack
