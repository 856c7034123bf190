#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "erfattack/tensor.hpp"

namespace erfattack {

// Binary greymap (P5) with maxval 255. Written as "P5\n<w> <h>\n255\n"
// followed by w*h raw bytes. The reader also accepts comments and arbitrary
// whitespace in the header, as the format allows.

/// Pixel values are rounded and clamped to [0, 255]; integral images round-trip exactly.
void write_pgm(std::ostream& out, const Tensor& image);
Tensor read_pgm(std::istream& in);

void save_pgm(const std::filesystem::path& path, const Tensor& image);
Tensor load_pgm(const std::filesystem::path& path);

}  // namespace erfattack
