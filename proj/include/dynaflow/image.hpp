#pragma once

// Planar rasters and 8-bit RGBA PNG IO.

#include <png.h>

#include <array>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "dynaflow/error.hpp"

namespace dynaflow {

// Channel-major (CHW) raster of doubles.
struct Image {
  int channels = 0;
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Image() = default;
  Image(int c, int r, int w, double fill = 0.0)
      : channels(c), rows(r), cols(w), data(static_cast<std::size_t>(c) * r * w, fill) {}

  double& at(int c, int r, int w) {
    return data[(static_cast<std::size_t>(c) * rows + r) * cols + w];
  }
  double at(int c, int r, int w) const {
    return data[(static_cast<std::size_t>(c) * rows + r) * cols + w];
  }

  Image crop(int row0, int col0, int height, int width) const {
    if (row0 < 0 || col0 < 0 || row0 + height > rows || col0 + width > cols)
      throw BoundsError("image crop outside raster");
    Image out(channels, height, width);
    for (int c = 0; c < channels; ++c)
      for (int r = 0; r < height; ++r)
        for (int w = 0; w < width; ++w) out.at(c, r, w) = at(c, row0 + r, col0 + w);
    return out;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

// 8-bit RGBA pixels, row-major.
struct Rgba {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> data;

  Rgba() = default;
  Rgba(int r, int w) : rows(r), cols(w), data(static_cast<std::size_t>(r) * w * 4, 0) {}

  std::uint8_t* px(int r, int w) { return &data[(static_cast<std::size_t>(r) * cols + w) * 4]; }
  const std::uint8_t* px(int r, int w) const {
    return &data[(static_cast<std::size_t>(r) * cols + w) * 4];
  }
  void set(int r, int w, std::array<std::uint8_t, 4> v) {
    auto* p = px(r, w);
    for (int i = 0; i < 4; ++i) p[i] = v[i];
  }
};

inline std::uint8_t to_byte(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(v * 255.0 + 0.5);
}

// Opaque RGBA view of a 1- or 3-channel image with values in [0, 1].
inline Rgba to_rgba(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ShapeError("to_rgba expects 1 or 3 channels");
  Rgba out(img.rows, img.cols);
  for (int r = 0; r < img.rows; ++r)
    for (int w = 0; w < img.cols; ++w) {
      const int c1 = img.channels == 3 ? 1 : 0;
      const int c2 = img.channels == 3 ? 2 : 0;
      out.set(r, w,
              {to_byte(img.at(0, r, w)), to_byte(img.at(c1, r, w)), to_byte(img.at(c2, r, w)), 255});
    }
  return out;
}

inline std::vector<std::uint8_t> encode_png(const Rgba& img) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.cols);
  pi.height = static_cast<png_uint_32>(img.rows);
  pi.format = PNG_FORMAT_RGBA;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(pi, size, 0, img.data.data(), 0, nullptr))
    throw FormatError(std::string("png encode failed: ") + pi.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&pi, out.data(), &size, 0, img.data.data(), 0, nullptr))
    throw FormatError(std::string("png encode failed: ") + pi.message);
  out.resize(size);
  return out;
}

inline void write_png(const std::string& path, const Rgba& img) {
  const auto bytes = encode_png(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Rgba decode_png(std::span<const std::uint8_t> bytes) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size()))
    throw FormatError(std::string("png decode failed: ") + pi.message);
  pi.format = PNG_FORMAT_RGBA;
  Rgba out(static_cast<int>(pi.height), static_cast<int>(pi.width));
  if (!png_image_finish_read(&pi, nullptr, out.data.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw FormatError(std::string("png decode failed: ") + pi.message);
  }
  return out;
}

inline Rgba read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot read " + path);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

// Three-channel [0, 1] image from the RGB part of an RGBA raster.
inline Image rgb_image(const Rgba& px) {
  Image out(3, px.rows, px.cols);
  for (int r = 0; r < px.rows; ++r)
    for (int c = 0; c < px.cols; ++c)
      for (int k = 0; k < 3; ++k) out.at(k, r, c) = px.px(r, c)[k] / 255.0;
  return out;
}

}  // namespace dynaflow
