#include "erfattack/pgm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <vector>

#include "erfattack/errors.hpp"

namespace erfattack {
namespace {

// Reads one header token, skipping whitespace and '#' comments.
std::string header_token(std::istream& in) {
  std::string token;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!token.empty()) return token;
      continue;
    }
    token.push_back(static_cast<char>(ch));
  }
  return token;
}

std::size_t header_number(std::istream& in, const char* what) {
  const std::string t = header_token(in);
  if (t.empty() || !std::all_of(t.begin(), t.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw IoError(std::string("malformed PGM header: bad ") + what);
  }
  return std::stoul(t);
}

}  // namespace

void write_pgm(std::ostream& out, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw ConfigError("PGM images must be [1, H, W], got " + shape_string(image.shape()));
  }
  out << "P5\n" << image.dim(2) << ' ' << image.dim(1) << "\n255\n";
  std::vector<char> bytes(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::clamp(std::round(image[i]), 0.0, 255.0)));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing PGM");
}

Tensor read_pgm(std::istream& in) {
  const std::string magic = header_token(in);
  if (magic != "P5") {
    throw IoError("unsupported image format '" + magic + "' (only binary PGM P5 is read)");
  }
  const std::size_t w = header_number(in, "width");
  const std::size_t h = header_number(in, "height");
  const std::size_t maxval = header_number(in, "maxval");
  if (w == 0 || h == 0) throw IoError("malformed PGM header: empty image");
  if (maxval != 255) throw IoError("unsupported PGM maxval " + std::to_string(maxval));
  // header_token consumed exactly one whitespace byte after maxval.
  std::vector<unsigned char> bytes(w * h);
  if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw IoError("truncated PGM payload");
  }
  Tensor image({1, h, w});
  for (std::size_t i = 0; i < bytes.size(); ++i) image[i] = bytes[i];
  return image;
}

void save_pgm(const std::filesystem::path& path, const Tensor& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_pgm(out, image);
}

Tensor load_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  return read_pgm(in);
}

}  // namespace erfattack
