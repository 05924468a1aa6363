#pragma once

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "msl/data.hpp"
#include "msl/tensor.hpp"

namespace msl {

/// 8-bit grayscale PNG I/O (libpng). Reads promote palette/RGB/16-bit inputs
/// to 8-bit gray; writes emit plain 8-bit grayscale.
struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<unsigned char> pixels;  // row-major, one byte per pixel
};

inline GrayImage read_png_gray(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw io_error("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw io_error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw io_error("malformed png: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
      color == PNG_COLOR_TYPE_PALETTE)
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);

  GrayImage im;
  im.width = png_get_image_width(png, info);
  im.height = png_get_image_height(png, info);
  im.pixels.resize(im.width * im.height);
  std::vector<png_bytep> rows(im.height);
  for (std::size_t y = 0; y < im.height; ++y) rows[y] = im.pixels.data() + y * im.width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return im;
}

inline void write_png_gray(const std::string& path, const GrayImage& im) {
  if (im.pixels.size() != im.width * im.height)
    throw input_error("write_png_gray: pixel buffer size mismatch");
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw io_error("cannot create " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw io_error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw io_error("png write failed: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(im.width),
               static_cast<png_uint_32>(im.height), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(im.height);
  for (std::size_t y = 0; y < im.height; ++y)
    rows[y] = const_cast<png_bytep>(im.pixels.data() + y * im.width);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

namespace detail {

/// Exact box-filter (area average) resample; handles fractional source boxes
/// such as 105 -> 28.
inline std::vector<double> box_resample(const std::vector<double>& src, std::size_t sw,
                                        std::size_t sh, std::size_t dw, std::size_t dh) {
  std::vector<double> dst(dw * dh, 0.0);
  const double fx = static_cast<double>(sw) / dw, fy = static_cast<double>(sh) / dh;
  for (std::size_t i = 0; i < dh; ++i) {
    const double y0 = i * fy, y1 = (i + 1) * fy;
    for (std::size_t j = 0; j < dw; ++j) {
      const double x0 = j * fx, x1 = (j + 1) * fx;
      double acc = 0.0;
      for (auto y = static_cast<std::size_t>(y0); y < sh && y < y1; ++y) {
        const double wy = std::min(y1, static_cast<double>(y) + 1) - std::max(y0, static_cast<double>(y));
        for (auto x = static_cast<std::size_t>(x0); x < sw && x < x1; ++x) {
          const double wx = std::min(x1, static_cast<double>(x) + 1) - std::max(x0, static_cast<double>(x));
          acc += wx * wy * src[y * sw + x];
        }
      }
      dst[i * dw + j] = acc / (fx * fy);
    }
  }
  return dst;
}

}  // namespace detail

struct OmniglotConfig {
  std::string root;          // tree of per-class folders of PNGs
  std::size_t per_class = 20;
  std::size_t image_size = 28;
};

/// Loads a glyph corpus from disk: every directory that directly contains
/// PNG files becomes a class (named by its path relative to the root).
/// Images are area-averaged down to image_size and inverted so ink = 1.
/// Classes with fewer than per_class examples are skipped with a warning;
/// larger classes are truncated (files taken in sorted order).
inline Dataset load_omniglot(const OmniglotConfig& cfg) {
  namespace fs = std::filesystem;
  if (cfg.per_class == 0 || cfg.image_size == 0)
    throw config_error("omniglot: per_class and image_size must be > 0");
  if (!fs::is_directory(cfg.root)) throw io_error("omniglot: no such directory: " + cfg.root);

  std::map<std::string, std::vector<std::string>> classes;
  for (const auto& entry : fs::recursive_directory_iterator(cfg.root)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
    const std::string cls = fs::relative(entry.path().parent_path(), cfg.root).generic_string();
    classes[cls].push_back(entry.path().string());
  }
  if (classes.empty()) throw input_error("omniglot: no PNG files under " + cfg.root);

  Dataset ds;
  ds.image_h = ds.image_w = cfg.image_size;
  ds.per_class = cfg.per_class;
  for (auto& [name, files] : classes) {
    if (files.size() < cfg.per_class) {
      std::fprintf(stderr, "warning: class %s has %zu < %zu examples, skipping\n",
                   name.c_str(), files.size(), cfg.per_class);
      continue;
    }
    std::sort(files.begin(), files.end());
    ds.class_names.push_back(name);
    for (std::size_t m = 0; m < cfg.per_class; ++m) {
      const GrayImage im = read_png_gray(files[m]);
      std::vector<double> gray(im.pixels.size());
      for (std::size_t i = 0; i < gray.size(); ++i)
        gray[i] = 1.0 - im.pixels[i] / 255.0;  // invert: ink becomes 1
      const auto small =
          detail::box_resample(gray, im.width, im.height, cfg.image_size, cfg.image_size);
      Tensor<float> t({1, cfg.image_size, cfg.image_size});
      for (std::size_t i = 0; i < small.size(); ++i) t[i] = static_cast<float>(small[i]);
      ds.images.push_back(std::move(t));
    }
  }
  if (ds.class_names.empty())
    throw input_error("omniglot: every class has fewer than requested examples");
  ds.validate();
  return ds;
}

}  // namespace msl
