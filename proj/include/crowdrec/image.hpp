// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

// Dense row-major images plus the two on-disk formats the dataset uses:
// PFM (32-bit float, little-endian, bottom-to-top rows) for depth and
// binary PGM (8-bit, top-to-bottom) for masks and instance maps.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace crowdrec {

template <typename T>
struct Image {
  int width = 0, height = 0;
  std::vector<T> pixels;

  Image() = default;
  Image(int w, int h, T fill = T{}) : width(w), height(h) {
    if (w <= 0 || h <= 0) throw std::invalid_argument("Image: non-positive size");
    pixels.assign(std::size_t(w) * h, fill);
  }

  T at(int x, int y) const { return pixels[std::size_t(y) * width + x]; }
  T& at(int x, int y) { return pixels[std::size_t(y) * width + x]; }
  bool in_bounds(int x, int y) const {
    return x >= 0 && y >= 0 && x < width && y < height;
  }
  bool same_size(const Image& o) const {
    return width == o.width && height == o.height;
  }
};

using DepthImage = Image<double>;    // +infinity marks background
using GrayImage = Image<double>;     // values in [0, 1]
using InstanceMap = Image<std::uint8_t>;  // 0 background, ids from 1
using MaskImage = Image<std::uint8_t>;    // 0 / 1

inline constexpr double kNoDepth = std::numeric_limits<double>::infinity();

// Bilinear sample at continuous (u, v) where pixel (x, y) is centered at
// (x + 0.5, y + 0.5); border-clamped.
inline double bilinear_sample(const Image<double>& img, double u, double v) {
  if (img.width <= 0 || img.height <= 0)
    throw std::invalid_argument("bilinear_sample: empty image");
  const double x = std::min(std::max(u - 0.5, 0.0), double(img.width - 1));
  const double y = std::min(std::max(v - 0.5, 0.0), double(img.height - 1));
  const int x0 = std::min(int(x), img.width - 2 >= 0 ? img.width - 2 : 0);
  const int y0 = std::min(int(y), img.height - 2 >= 0 ? img.height - 2 : 0);
  const int x1 = std::min(x0 + 1, img.width - 1);
  const int y1 = std::min(y0 + 1, img.height - 1);
  const double fx = std::min(std::max(x - x0, 0.0), 1.0);
  const double fy = std::min(std::max(y - y0, 0.0), 1.0);
  const double a = img.at(x0, y0) * (1 - fx) + img.at(x1, y0) * fx;
  const double b = img.at(x0, y1) * (1 - fx) + img.at(x1, y1) * fx;
  return a * (1 - fy) + b * fy;
}

// Quantizes [0,1] to 8 bits, clamping out-of-range values.
inline MaskImage to_gray8(const GrayImage& img) {
  MaskImage out(img.width, img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double v = std::min(std::max(img.pixels[i], 0.0), 1.0);
    out.pixels[i] = std::uint8_t(std::lround(v * 255.0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PFM (grayscale "Pf"): negative scale marks little-endian; rows are stored
// bottom-to-top per the format's convention.

inline void write_pfm(const std::string& path, const Image<double>& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_pfm: cannot open " + path);
  f << "Pf\n" << img.width << " " << img.height << "\n-1.0\n";
  std::vector<float> row(img.width);
  for (int y = img.height - 1; y >= 0; --y) {
    for (int x = 0; x < img.width; ++x) row[x] = float(img.at(x, y));
    f.write(reinterpret_cast<const char*>(row.data()),
            std::streamsize(row.size() * sizeof(float)));
  }
  if (!f) throw std::runtime_error("write_pfm: write failed for " + path);
}

inline Image<double> read_pfm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_pfm: cannot open " + path);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0.0;
  f >> magic >> w >> h >> scale;
  if (magic != "Pf" || w <= 0 || h <= 0 || scale == 0.0)
    throw std::runtime_error("read_pfm: malformed header in " + path);
  if (scale > 0.0)
    throw std::runtime_error("read_pfm: big-endian data unsupported in " + path);
  f.get();  // single whitespace after the scale line
  Image<double> img(w, h);
  std::vector<float> row(w);
  for (int y = h - 1; y >= 0; --y) {
    f.read(reinterpret_cast<char*>(row.data()),
           std::streamsize(row.size() * sizeof(float)));
    if (!f) throw std::runtime_error("read_pfm: truncated data in " + path);
    for (int x = 0; x < w; ++x) img.at(x, y) = double(row[x]);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Binary PGM (P5), maxval 255.

inline void write_pgm(const std::string& path, const Image<std::uint8_t>& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()),
          std::streamsize(img.pixels.size()));
  if (!f) throw std::runtime_error("write_pgm: write failed for " + path);
}

inline Image<std::uint8_t> read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_pgm: cannot open " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error("read_pgm: malformed header in " + path);
  f.get();
  Image<std::uint8_t> img(w, h);
  f.read(reinterpret_cast<char*>(img.pixels.data()),
         std::streamsize(img.pixels.size()));
  if (!f) throw std::runtime_error("read_pgm: truncated data in " + path);
  return img;
}

}  // namespace crowdrec
