#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <string>
#include <vector>

#include "excount/error.hpp"

namespace excount {

struct Point {
  double x = 0;
  double y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

// H x W nonnegative grid; sum / scale is the object count.
struct DensityMap {
  int height = 0;
  int width = 0;
  double scale = 1.0;
  std::vector<double> grid;  // row-major, size height * width

  DensityMap() = default;
  DensityMap(int h, int w, double s = 1.0) : height(h), width(w), scale(s), grid(std::size_t(h) * w, 0.0) {}

  double& at(int y, int x) { return grid[std::size_t(y) * width + x]; }
  double at(int y, int x) const { return grid[std::size_t(y) * width + x]; }
  std::size_t size() const { return grid.size(); }
  double sum() const { return std::accumulate(grid.begin(), grid.end(), 0.0); }

  friend bool operator==(const DensityMap&, const DensityMap&) = default;
};

inline void require_same_shape(const DensityMap& a, const DensityMap& b, const char* what) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError(std::string(what) + ": shape mismatch " + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                     std::to_string(b.width));
  }
}

inline double count_from_density(const DensityMap& d) { return d.sum() / d.scale; }

// Each dot contributes a Gaussian truncated at 4 sigma and clipped to the image,
// then renormalized so its in-image mass is exactly `scale`.
inline DensityMap generate_density_map(const std::vector<Point>& points, int height, int width,
                                       double sigma, double scale = 1.0) {
  if (!(sigma > 0)) throw ConfigError("sigma must be positive");
  if (!(scale > 0)) throw ConfigError("density scale must be positive");
  DensityMap d(height, width, scale);
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> kernel;
  for (std::size_t n = 0; n < points.size(); ++n) {
    const Point& p = points[n];
    if (!(p.x >= 0 && p.x < width && p.y >= 0 && p.y < height)) {
      throw ConfigError("point " + std::to_string(n) + " (" + std::to_string(p.x) + "," +
                        std::to_string(p.y) + ") outside " + std::to_string(width) + "x" +
                        std::to_string(height) + " image");
    }
    const int cx = static_cast<int>(std::floor(p.x));
    const int cy = static_cast<int>(std::floor(p.y));
    const int x0 = std::max(0, cx - radius), x1 = std::min(width - 1, cx + radius);
    const int y0 = std::max(0, cy - radius), y1 = std::min(height - 1, cy + radius);
    kernel.assign(std::size_t(x1 - x0 + 1) * (y1 - y0 + 1), 0.0);
    double total = 0;
    const double cutoff = 4.0 * sigma;
    std::size_t k = 0;
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x, ++k) {
        const double dx = x + 0.5 - p.x;
        const double dy = y + 0.5 - p.y;
        const double r2 = dx * dx + dy * dy;
        if (r2 > cutoff * cutoff) continue;
        kernel[k] = std::exp(-r2 / (2 * sigma * sigma));
        total += kernel[k];
      }
    }
    if (total <= 0) {
      // Unreachable for sigma > 0 (the dot's own pixel is within the cutoff).
      d.at(cy, cx) += scale;
      continue;
    }
    k = 0;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x, ++k) d.at(y, x) += scale * kernel[k] / total;
  }
  return d;
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<std::uint8_t>(in[off + i])) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(const std::string& in, std::size_t off) {
  return std::bit_cast<float>(get_u32(in, off));
}

}  // namespace detail

inline constexpr std::uint8_t kDensityFormatVersion = 1;

// "DMAP" | version u8 | H u32 | W u32 | scale f32 | H*W f32, all little-endian.
// Values are narrowed to float32.
inline std::string write_density(const DensityMap& d) {
  std::string out = "DMAP";
  out.push_back(static_cast<char>(kDensityFormatVersion));
  detail::put_u32(out, static_cast<std::uint32_t>(d.height));
  detail::put_u32(out, static_cast<std::uint32_t>(d.width));
  detail::put_f32(out, static_cast<float>(d.scale));
  for (double v : d.grid) detail::put_f32(out, static_cast<float>(v));
  return out;
}

inline DensityMap read_density(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "DMAP") != 0) {
    throw FormatError("density file: bad magic at offset 0");
  }
  if (bytes.size() < 17) {
    throw FormatError("density file: truncated header at offset " + std::to_string(bytes.size()));
  }
  if (static_cast<std::uint8_t>(bytes[4]) != kDensityFormatVersion) {
    throw FormatError("density file: unsupported version " +
                      std::to_string(static_cast<std::uint8_t>(bytes[4])) + " at offset 4");
  }
  const std::uint32_t h = detail::get_u32(bytes, 5);
  const std::uint32_t w = detail::get_u32(bytes, 9);
  const float scale = detail::get_f32(bytes, 13);
  if (!(scale > 0) || !std::isfinite(scale)) {
    throw FormatError("density file: invalid scale at offset 13");
  }
  const std::size_t need = 17 + 4ull * h * w;
  if (bytes.size() < need) {
    throw FormatError("density file: truncated payload at offset " + std::to_string(bytes.size()) +
                      " (expected " + std::to_string(need) + " bytes)");
  }
  if (bytes.size() > need) {
    throw FormatError("density file: trailing bytes at offset " + std::to_string(need));
  }
  DensityMap d(static_cast<int>(h), static_cast<int>(w), scale);
  for (std::size_t i = 0; i < d.grid.size(); ++i) d.grid[i] = detail::get_f32(bytes, 17 + 4 * i);
  return d;
}

}  // namespace excount
