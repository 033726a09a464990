#pragma once

// Independent oracles and helpers shared by the test binaries.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "excount/geometry.hpp"

namespace excount::testing {

// IoU by counting sub-pixel sample points on a grid of `step` spacing.
inline double raster_iou(const Box& a, const Box& b, double step = 0.01) {
  const double x0 = std::min(a.x_min, b.x_min), x1 = std::max(a.x_max, b.x_max);
  const double y0 = std::min(a.y_min, b.y_min), y1 = std::max(a.y_max, b.y_max);
  long inter = 0, uni = 0;
  for (double y = y0 + step / 2; y < y1; y += step) {
    for (double x = x0 + step / 2; x < x1; x += step) {
      const bool in_a = a.contains(x, y), in_b = b.contains(x, y);
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Overlap area from the four corner coordinates, written independently of iou().
inline double pair_iou(const Box& a, const Box& b) {
  const double w = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double h = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = w * h;
  const double area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min);
  const double area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min);
  return inter / (area_a + area_b - inter);
}

// Exhaustive all-pairs negative filter.
inline std::vector<ScoredBox> brute_dedup(const std::vector<ScoredBox>& negatives, const std::vector<ScoredBox>& positives,
                                          double tau) {
  std::vector<ScoredBox> out;
  for (const auto& n : negatives) {
    bool keep = true;
    for (const auto& p : positives)
      if (pair_iou(n.box, p.box) >= tau) keep = false;
    if (keep) out.push_back(n);
  }
  return out;
}

inline Box random_box(std::mt19937_64& rng, double extent = 100.0, double max_side = 40.0) {
  std::uniform_real_distribution<double> pos(0.0, extent - 1.0), side(1.0, max_side);
  const double x = pos(rng), y = pos(rng);
  return {x, y, x + side(rng), y + side(rng)};
}

inline std::vector<ScoredBox> random_scored(std::mt19937_64& rng, std::size_t n, double extent = 100.0,
                                            double max_side = 40.0) {
  std::uniform_real_distribution<double> logit(0.0, 1.0);
  std::vector<ScoredBox> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back({random_box(rng, extent, max_side), logit(rng), "t"});
  return v;
}

inline bool same_boxes(const std::vector<ScoredBox>& a, const std::vector<ScoredBox>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i].box == b[i].box) || a[i].logit != b[i].logit) return false;
  return true;
}

// Fourth-order central difference.
inline double central_diff(const std::function<double(double)>& f, double h = 1e-3) {
  return (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
}

inline double rel_error(double analytic, double numeric, double floor = 1e-7) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Mann-Kendall trend test. Returns the S statistic and the one-sided p-value
// for a decreasing trend (normal approximation with continuity correction).
struct TrendResult {
  double s = 0;
  double z = 0;
  double p_decreasing = 1;
};

inline TrendResult mann_kendall(const std::vector<double>& x) {
  const std::size_t n = x.size();
  TrendResult r;
  for (std::size_t i = 0; i + 1 < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) r.s += (x[j] > x[i]) - (x[j] < x[i]);
  const double var = static_cast<double>(n) * (n - 1.0) * (2.0 * n + 5.0) / 18.0;
  if (var <= 0) return r;
  r.z = r.s > 0 ? (r.s - 1) / std::sqrt(var) : r.s < 0 ? (r.s + 1) / std::sqrt(var) : 0.0;
  r.p_decreasing = 0.5 * std::erfc(-r.z / std::sqrt(2.0));
  return r;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

}  // namespace excount::testing
