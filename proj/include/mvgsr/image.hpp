#pragma once

// Planar float images and 8-bit PNG / PGM file I/O.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "mvgsr/error.hpp"

namespace mvgsr {

/// Channel-planar (CHW) image, nominal range [0, 1].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }

  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  bool same_shape(const Image& o) const { return channels == o.channels && height == o.height && width == o.width; }

  Image clamped() const {
    Image out = *this;
    for (float& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
    return out;
  }

  /// Values rounded to the nearest 8-bit level.
  Image quantized() const {
    Image out = *this;
    for (float& v : out.data) v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
    return out;
  }

  Image crop(int y0, int x0, int h, int w) const {
    Image out(channels, h, w);
    for (int c = 0; c < channels; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(c, y, x) = at(c, y0 + y, x0 + x);
    return out;
  }
};

namespace detail {

struct PngReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadGuard() { png_destroy_read_struct(&png, info ? &info : nullptr, nullptr); }
};

struct PngWriteGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteGuard() { png_destroy_write_struct(&png, info ? &info : nullptr); }
};

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace detail

/// Writes an 8-bit grayscale (1 channel) or RGB (3 channels) PNG.
inline void write_png(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 1 && img.channels != 3) fail(Errc::InvalidArgument, "PNG needs 1 or 3 channels");
  std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) fail(Errc::IoError, "cannot write " + path.string());
  detail::PngWriteGuard g;
  g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!g.png) fail(Errc::IoError, "png_create_write_struct failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info || setjmp(png_jmpbuf(g.png))) fail(Errc::IoError, "libpng error writing " + path.string());
  png_init_io(g.png, fp.get());
  png_set_IHDR(g.png, g.info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(g.png, g.info);
  std::vector<png_byte> row(static_cast<std::size_t>(img.width) * img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        row[static_cast<std::size_t>(x) * img.channels + c] =
            static_cast<png_byte>(std::lround(std::clamp(img.at(c, y, x), 0.0f, 1.0f) * 255.0f));
    png_write_row(g.png, row.data());
  }
  png_write_end(g.png, nullptr);
}

/// Reads an 8-bit PNG; palette and 16-bit inputs are converted, alpha dropped.
inline Image read_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) fail(Errc::IoError, "cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
    fail(Errc::MalformedFile, path.string() + " is not a PNG file");
  detail::PngReadGuard g;
  g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!g.png) fail(Errc::IoError, "png_create_read_struct failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info || setjmp(png_jmpbuf(g.png))) fail(Errc::MalformedFile, "libpng error reading " + path.string());
  png_init_io(g.png, fp.get());
  png_set_sig_bytes(g.png, 8);
  png_read_info(g.png, g.info);
  png_set_strip_16(g.png);
  png_set_strip_alpha(g.png);
  png_set_packing(g.png);
  png_set_palette_to_rgb(g.png);
  png_set_expand_gray_1_2_4_to_8(g.png);
  png_read_update_info(g.png, g.info);
  const int w = static_cast<int>(png_get_image_width(g.png, g.info));
  const int h = static_cast<int>(png_get_image_height(g.png, g.info));
  const int c = static_cast<int>(png_get_channels(g.png, g.info));
  if (c != 1 && c != 3) fail(Errc::MalformedFile, "unsupported PNG channel layout in " + path.string());
  Image img(c, h, w);
  std::vector<png_byte> row(png_get_rowbytes(g.png, g.info));
  for (int y = 0; y < h; ++y) {
    png_read_row(g.png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) img.at(ch, y, x) = row[static_cast<std::size_t>(x) * c + ch] / 255.0f;
  }
  return img;
}

/// Binary 8-bit PGM (P5) of the first channel.
inline void write_pgm(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::IoError, "cannot write " + path.string());
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      out.put(static_cast<char>(std::lround(std::clamp(img.at(0, y, x), 0.0f, 1.0f) * 255.0f)));
  if (!out) fail(Errc::IoError, "short write to " + path.string());
}

inline Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::IoError, "cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) fail(Errc::MalformedFile, path.string() + " is not an 8-bit PGM");
  in.get();
  Image img(1, h, w);
  for (float& v : img.data) {
    const int b = in.get();
    if (b == EOF) fail(Errc::MalformedFile, "truncated PGM " + path.string());
    v = static_cast<float>(b) / 255.0f;
  }
  return img;
}

inline Image read_image(const std::filesystem::path& path) {
  return path.extension() == ".pgm" ? read_pgm(path) : read_png(path);
}

}  // namespace mvgsr
