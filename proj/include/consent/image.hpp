#pragma once

// Dense 8-bit rasters and binary PPM (P6) I/O. PPM keeps the pipeline
// codec-free and bit-exact; conversion to other formats is external.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "consent/common.hpp"

namespace consent {

struct Box {
  int x = 0, y = 0, w = 0, h = 0;
};

class GrayImage {
 public:
  GrayImage() = default;
  GrayImage(int width, int height, std::uint8_t fill = 0)
      : w_(width), h_(height), px_(static_cast<std::size_t>(width) * height, fill) {
    if (width <= 0 || height <= 0) throw DimensionError("GrayImage: non-positive size");
  }

  int width() const { return w_; }
  int height() const { return h_; }
  std::uint8_t& at(int x, int y) { return px_[static_cast<std::size_t>(y) * w_ + x]; }
  std::uint8_t at(int x, int y) const { return px_[static_cast<std::size_t>(y) * w_ + x]; }
  const std::vector<std::uint8_t>& pixels() const { return px_; }
  std::vector<std::uint8_t>& pixels() { return px_; }

  GrayImage crop(const Box& b) const {
    if (b.w <= 0 || b.h <= 0 || b.x < 0 || b.y < 0 || b.x + b.w > w_ || b.y + b.h > h_)
      throw ValidationError("crop: box outside image bounds");
    GrayImage out(b.w, b.h);
    for (int y = 0; y < b.h; ++y)
      for (int x = 0; x < b.w; ++x) out.at(x, y) = at(b.x + x, b.y + y);
    return out;
  }

 private:
  int w_ = 0, h_ = 0;
  std::vector<std::uint8_t> px_;
};

class RgbImage {
 public:
  RgbImage() = default;
  RgbImage(int width, int height, std::uint8_t fill = 0)
      : w_(width), h_(height), px_(static_cast<std::size_t>(width) * height * 3, fill) {
    if (width <= 0 || height <= 0) throw DimensionError("RgbImage: non-positive size");
  }

  int width() const { return w_; }
  int height() const { return h_; }
  std::uint8_t* at(int x, int y) { return &px_[(static_cast<std::size_t>(y) * w_ + x) * 3]; }
  const std::uint8_t* at(int x, int y) const {
    return &px_[(static_cast<std::size_t>(y) * w_ + x) * 3];
  }
  const std::vector<std::uint8_t>& pixels() const { return px_; }
  std::vector<std::uint8_t>& pixels() { return px_; }

  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    std::uint8_t* p = at(x, y);
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }

  RgbImage crop(const Box& b) const {
    if (b.w <= 0 || b.h <= 0 || b.x < 0 || b.y < 0 || b.x + b.w > w_ || b.y + b.h > h_)
      throw ValidationError("crop: box outside image bounds");
    RgbImage out(b.w, b.h);
    for (int y = 0; y < b.h; ++y)
      for (int x = 0; x < b.w; ++x) {
        const std::uint8_t* p = at(b.x + x, b.y + y);
        out.set(x, y, p[0], p[1], p[2]);
      }
    return out;
  }

  GrayImage channel(int c) const {
    GrayImage out(w_, h_);
    for (int y = 0; y < h_; ++y)
      for (int x = 0; x < w_; ++x) out.at(x, y) = at(x, y)[c];
    return out;
  }

  /// Rec.601 luma, rounded.
  GrayImage to_gray() const {
    GrayImage out(w_, h_);
    for (int y = 0; y < h_; ++y) {
      for (int x = 0; x < w_; ++x) {
        const std::uint8_t* p = at(x, y);
        const double v = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        out.at(x, y) = static_cast<std::uint8_t>(v + 0.5);
      }
    }
    return out;
  }

 private:
  int w_ = 0, h_ = 0;
  std::vector<std::uint8_t> px_;
};

// ---------------------------------------------------------------------------
// PPM P6, 8-bit, maxval 255.

inline void write_ppm(const std::string& path, const RgbImage& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_ppm: cannot open " + path);
  f << "P6\n" << img.width() << " " << img.height() << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels().data()),
          static_cast<std::streamsize>(img.pixels().size()));
  if (!f) throw IoError("write_ppm: short write to " + path);
}

namespace detail {
inline int ppm_token(std::istream& in) {
  // Skips whitespace and '#' comments, then parses one unsigned integer.
  int c = in.get();
  for (;;) {
    while (c == ' ' || c == '\t' || c == '\r' || c == '\n') c = in.get();
    if (c == '#') {
      while (c != '\n' && c != EOF) c = in.get();
      continue;
    }
    break;
  }
  if (c < '0' || c > '9') throw IoError("ppm: malformed header");
  int v = 0;
  while (c >= '0' && c <= '9') {
    v = v * 10 + (c - '0');
    c = in.get();
  }
  return v;
}
}  // namespace detail

inline RgbImage read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_ppm: cannot open " + path);
  char m0 = 0, m1 = 0;
  f.get(m0);
  f.get(m1);
  if (m0 != 'P' || m1 != '6') throw IoError("read_ppm: not a P6 file: " + path);
  const int w = detail::ppm_token(f);
  const int h = detail::ppm_token(f);
  const int maxval = detail::ppm_token(f);
  if (maxval != 255) throw IoError("read_ppm: unsupported maxval");
  RgbImage img(w, h);
  f.read(reinterpret_cast<char*>(img.pixels().data()),
         static_cast<std::streamsize>(img.pixels().size()));
  if (f.gcount() != static_cast<std::streamsize>(img.pixels().size()))
    throw IoError("read_ppm: truncated pixel data in " + path);
  return img;
}

// ---------------------------------------------------------------------------
// Bilinear sampling of a source rectangle onto a fixed-size grid. Pixel
// centers, clamped at borders; values scaled to [0, 1].

inline std::vector<double> resize_bilinear(const GrayImage& src, int out_w, int out_h) {
  if (out_w <= 0 || out_h <= 0) throw DimensionError("resize_bilinear: bad target size");
  std::vector<double> out(static_cast<std::size_t>(out_w) * out_h);
  const double sx = static_cast<double>(src.width()) / out_w;
  const double sy = static_cast<double>(src.height()) / out_h;
  for (int y = 0; y < out_h; ++y) {
    const double fy = (y + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    const double wy = fy - y0;
    int y1 = y0 + 1;
    y0 = std::clamp(y0, 0, src.height() - 1);
    y1 = std::clamp(y1, 0, src.height() - 1);
    for (int x = 0; x < out_w; ++x) {
      const double fx = (x + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      const double wx = fx - x0;
      int x1 = x0 + 1;
      x0 = std::clamp(x0, 0, src.width() - 1);
      x1 = std::clamp(x1, 0, src.width() - 1);
      const double v = (1.0 - wy) * ((1.0 - wx) * src.at(x0, y0) + wx * src.at(x1, y0)) +
                       wy * ((1.0 - wx) * src.at(x0, y1) + wx * src.at(x1, y1));
      out[static_cast<std::size_t>(y) * out_w + x] = v / 255.0;
    }
  }
  return out;
}

}  // namespace consent
