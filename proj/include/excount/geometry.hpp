#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "excount/error.hpp"

namespace excount {

// Axis-aligned half-open rectangle in image pixel coordinates (origin top-left).
struct Box {
  double x_min = 0;
  double y_min = 0;
  double x_max = 0;
  double y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }

  bool valid() const {
    return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
           std::isfinite(y_max) && x_min < x_max && y_min < y_max;
  }

  bool contains(double x, double y) const {
    return x >= x_min && x < x_max && y >= y_min && y < y_max;
  }

  friend bool operator==(const Box&, const Box&) = default;
};

// A detector proposal: box plus its text-conditioned confidence in [0,1].
struct ScoredBox {
  Box box;
  double logit = 0;
  std::string source_prompt;

  friend bool operator==(const ScoredBox&, const ScoredBox&) = default;
};

inline void require_valid(const Box& b) {
  if (!b.valid()) {
    throw GeometryError("invalid box [" + std::to_string(b.x_min) + "," + std::to_string(b.y_min) +
                        "," + std::to_string(b.x_max) + "," + std::to_string(b.y_max) + "]");
  }
}

inline Box intersection(const Box& a, const Box& b) {
  return {std::max(a.x_min, b.x_min), std::max(a.y_min, b.y_min), std::min(a.x_max, b.x_max),
          std::min(a.y_max, b.y_max)};
}

inline Box union_box(const Box& a, const Box& b) {
  return {std::min(a.x_min, b.x_min), std::min(a.y_min, b.y_min), std::max(a.x_max, b.x_max),
          std::max(a.y_max, b.y_max)};
}

// Clip to [0,width) x [0,height). The result may be degenerate if b lies outside.
inline Box clip_to(const Box& b, double width, double height) {
  return {std::clamp(b.x_min, 0.0, width), std::clamp(b.y_min, 0.0, height),
          std::clamp(b.x_max, 0.0, width), std::clamp(b.y_max, 0.0, height)};
}

inline double iou(const Box& a, const Box& b) {
  require_valid(a);
  require_valid(b);
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// Keeps a negative iff its IoU with every positive is strictly below tau_iou.
// Input order is preserved.
inline std::vector<ScoredBox> dedup_negatives(std::span<const ScoredBox> negatives,
                                              std::span<const ScoredBox> positives,
                                              double tau_iou) {
  if (!(tau_iou > 0.0 && tau_iou <= 1.0)) {
    throw ConfigError("tau_iou must lie in (0,1], got " + std::to_string(tau_iou));
  }
  std::vector<ScoredBox> kept;
  kept.reserve(negatives.size());
  for (const auto& n : negatives) {
    const bool unique = std::all_of(positives.begin(), positives.end(),
                                    [&](const ScoredBox& p) { return iou(n.box, p.box) < tau_iou; });
    if (unique) kept.push_back(n);
  }
  return kept;
}

// Total order used wherever candidates are ranked: logit descending, then area
// descending, then original index ascending.
template <typename Range>
std::vector<std::size_t> rank_by_logit(const Range& boxes) {
  std::vector<std::size_t> order(boxes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const ScoredBox& ba = boxes[a];
    const ScoredBox& bb = boxes[b];
    if (ba.logit != bb.logit) return ba.logit > bb.logit;
    if (ba.box.area() != bb.box.area()) return ba.box.area() > bb.box.area();
    return a < b;
  });
  return order;
}

}  // namespace excount
