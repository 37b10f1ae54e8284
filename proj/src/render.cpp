#include "decisive/render.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <limits>
#include <memory>

#include "decisive/errors.hpp"
#include "decisive/rng.hpp"

namespace decisive {
namespace {

constexpr std::uint64_t kProjectionSeed = 0x9C0107ULL;

struct File {
  std::FILE* f = nullptr;
  ~File() {
    if (f) std::fclose(f);
  }
};

void write_png(const std::string& path, std::size_t width, std::size_t height, int color_type,
               const std::vector<std::array<std::uint8_t, 3>>* palette,
               const std::vector<std::uint8_t>& pixels, std::size_t channels) {
  File file;
  file.f = std::fopen(path.c_str(), "wb");
  if (!file.f) throw InputError("cannot write image " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw InputError("png: out of memory");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw InputError("png: failed writing " + path);
  }
  png_init_io(png, file.f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_color> colors;
  if (palette) {
    for (const auto& c : *palette) colors.push_back({c[0], c[1], c[2]});
    png_set_PLTE(png, info, colors.data(), static_cast<int>(colors.size()));
  }
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(&pixels[y * width * channels]));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

std::array<std::uint8_t, 3> RgbImage::pixel(std::size_t row, std::size_t col) const {
  const std::size_t i = (row * width + col) * 3;
  return {rgb[i], rgb[i + 1], rgb[i + 2]};
}

const std::vector<std::array<std::uint8_t, 3>>& layout_palette() {
  static const std::vector<std::array<std::uint8_t, 3>> p = {
      {{30, 30, 30}},    {{230, 25, 75}},  {{60, 180, 75}},   {{255, 225, 25}},
      {{0, 130, 200}},   {{245, 130, 48}}, {{145, 30, 180}},  {{70, 240, 240}},
      {{240, 50, 230}},  {{210, 245, 60}}, {{250, 190, 212}}};
  return p;
}

void write_layout_png(const HardLayout& layout, const std::string& path) {
  if (!layout.is_valid()) throw InputError("render: invalid hard layout");
  if (layout.k + 1 > static_cast<int>(layout_palette().size())) {
    throw InputError("render: at most 10 subject clusters can be drawn");
  }
  std::vector<std::uint8_t> idx(layout.labels.begin(), layout.labels.end());
  write_png(path, layout.width, layout.height, PNG_COLOR_TYPE_PALETTE, &layout_palette(), idx, 1);
}

RgbImage soft_layout_image(const SoftLayout& soft) {
  const Tensor& S = soft.S;
  if (S.rank() != 3) throw InputError("render: soft layout must be [H, W, d]");
  const std::size_t H = S.dim(0), W = S.dim(1), d = S.dim(2);
  const CounterRng rng(kProjectionSeed);
  std::vector<double> proj(3 * d);
  for (std::size_t i = 0; i < proj.size(); ++i) proj[i] = rng.normal_at(i);
  std::vector<double> v(H * W * 3, 0.0);
  double lo[3], hi[3];
  for (int c = 0; c < 3; ++c) {
    lo[c] = std::numeric_limits<double>::infinity();
    hi[c] = -lo[c];
  }
  for (std::size_t p = 0; p < H * W; ++p) {
    for (int c = 0; c < 3; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += S[p * d + j] * proj[c * d + j];
      v[p * 3 + c] = s;
      lo[c] = std::min(lo[c], s);
      hi[c] = std::max(hi[c], s);
    }
  }
  RgbImage img;
  img.width = W;
  img.height = H;
  img.rgb.resize(H * W * 3);
  for (std::size_t p = 0; p < H * W; ++p) {
    for (int c = 0; c < 3; ++c) {
      const double span = hi[c] - lo[c];
      const double u = span > 0.0 ? (v[p * 3 + c] - lo[c]) / span : 0.5;
      img.rgb[p * 3 + c] = static_cast<std::uint8_t>(std::lround(255.0 * u));
    }
  }
  return img;
}

void write_rgb_png(const RgbImage& image, const std::string& path) {
  write_png(path, image.width, image.height, PNG_COLOR_TYPE_RGB, nullptr, image.rgb, 3);
}

void write_soft_png(const SoftLayout& soft, const std::string& path) {
  write_rgb_png(soft_layout_image(soft), path);
}

RgbImage read_png(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw InputError("cannot read image " + path + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  RgbImage out;
  out.width = image.width;
  out.height = image.height;
  out.rgb.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.rgb.data(), 0, nullptr)) {
    png_image_free(&image);
    throw InputError("cannot decode image " + path + ": " + image.message);
  }
  return out;
}

}  // namespace decisive
