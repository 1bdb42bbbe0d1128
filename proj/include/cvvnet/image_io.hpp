#pragma once

// 8-bit grayscale PGM/PNG and RGB PNG files.

#include <cstdint>
#include <string>
#include <vector>

#include "cvvnet/gait.hpp"

namespace cvvnet {

using Gray8 = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Rgb8 {
  Index height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // row-major, 3 bytes per pixel
};

Gray8 read_gray(const std::string& path);  // dispatches on the .pgm/.png extension
void write_pgm(const std::string& path, const Gray8& image);
void write_png(const std::string& path, const Gray8& image);
void write_png(const std::string& path, const Rgb8& image);

/// Any value >= 128 is foreground.
Mask read_mask(const std::string& path);
/// Foreground is stored as 255.
void write_mask(const std::string& path, const Mask& mask);

}  // namespace cvvnet
