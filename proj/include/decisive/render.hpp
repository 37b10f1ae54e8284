#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "decisive/layout.hpp"
#include "decisive/soft_layout.hpp"

namespace decisive {

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  std::array<std::uint8_t, 3> pixel(std::size_t row, std::size_t col) const;
};

/// Fixed 11-colour palette: background then ten subject colours.
const std::vector<std::array<std::uint8_t, 3>>& layout_palette();

/// Labels 0..10 as an indexed-colour PNG.
void write_layout_png(const HardLayout& layout, const std::string& path);
/// Soft layout projected on three seeded directions, min-max scaled to RGB.
RgbImage soft_layout_image(const SoftLayout& soft);
void write_soft_png(const SoftLayout& soft, const std::string& path);
void write_rgb_png(const RgbImage& image, const std::string& path);
/// Decodes any 8-bit PNG to RGB.
RgbImage read_png(const std::string& path);

}  // namespace decisive
