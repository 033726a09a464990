#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "excount/density.hpp"
#include "excount/error.hpp"
#include "excount/geometry.hpp"
#include "excount/image.hpp"

namespace excount {

inline constexpr std::array<float, 3> kBoxColor{0.0f, 1.0f, 0.0f};
inline constexpr double kOverlayAlpha = 0.6;

// Blue -> cyan -> yellow -> red ramp for t in [0,1].
inline std::array<float, 3> heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const double r = std::clamp(2.0 * t - 0.5, 0.0, 1.0);
  const double g = t < 0.75 ? std::clamp(2.0 * t, 0.0, 1.0) : std::clamp(4.0 * (1.0 - t), 0.0, 1.0);
  const double b = std::clamp(1.0 - 2.0 * t, 0.0, 1.0);
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

// Draws the 1-pixel outline of b at pixel columns floor(x_min)..ceil(x_max)-1
// and rows floor(y_min)..ceil(y_max)-1, clipped to the image.
inline void draw_box(Image& img, const Box& b, const std::array<float, 3>& color = kBoxColor) {
  const int x0 = std::max(0, static_cast<int>(std::floor(b.x_min)));
  const int y0 = std::max(0, static_cast<int>(std::floor(b.y_min)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(b.x_max)) - 1);
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(b.y_max)) - 1);
  if (x1 < x0 || y1 < y0) return;
  auto put = [&](int x, int y) {
    for (int c = 0; c < 3; ++c) img.at(x, y, c) = color[c];
  };
  for (int x = x0; x <= x1; ++x) {
    put(x, y0);
    put(x, y1);
  }
  for (int y = y0; y <= y1; ++y) {
    put(x0, y);
    put(x1, y);
  }
}

// Blends a heatmap of the density (normalized by its maximum) over the image;
// zero density leaves pixels untouched.
inline Image render_overlay(const Image& image, const DensityMap& density, const std::vector<Box>& boxes = {}) {
  if (density.height != image.height || density.width != image.width) {
    throw ShapeError("overlay: density is " + std::to_string(density.height) + "x" + std::to_string(density.width) +
                     " but image is " + std::to_string(image.height) + "x" + std::to_string(image.width));
  }
  Image out = image;
  double peak = 0;
  for (double v : density.grid) peak = std::max(peak, v);
  if (peak > 0) {
    for (int y = 0; y < image.height; ++y) {
      for (int x = 0; x < image.width; ++x) {
        const double t = std::max(0.0, density.at(y, x)) / peak;
        if (t <= 0) continue;
        const auto h = heat_color(t);
        const double a = kOverlayAlpha * t;
        for (int c = 0; c < 3; ++c) out.at(x, y, c) = static_cast<float>((1 - a) * image.at(x, y, c) + a * h[c]);
      }
    }
  }
  for (const Box& b : boxes) draw_box(out, b);
  return out;
}

inline void write_overlay(const std::filesystem::path& path, const Image& image, const DensityMap& density,
                          const std::vector<Box>& boxes = {}) {
  write_ppm(path, render_overlay(image, density, boxes));
}

}  // namespace excount
