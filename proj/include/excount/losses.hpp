#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "excount/density.hpp"
#include "excount/error.hpp"

namespace excount {

inline constexpr double kSimilarityEpsilon = 1e-8;

// Cosine similarity of flattened maps. The denominator is floored at 1e-8, which
// makes the similarity of an all-zero map 0.
inline double similarity(const DensityMap& a, const DensityMap& b) {
  require_same_shape(a, b, "similarity");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a.grid[i] * b.grid[i];
    na += a.grid[i] * a.grid[i];
    nb += b.grid[i] * b.grid[i];
  }
  return dot / std::max(std::sqrt(na) * std::sqrt(nb), kSimilarityEpsilon);
}

// d similarity(a, b) / d a, written into grad (resized).
inline void similarity_grad(const DensityMap& a, const DensityMap& b, std::vector<double>& grad) {
  require_same_shape(a, b, "similarity");
  double dot = 0, na2 = 0, nb2 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a.grid[i] * b.grid[i];
    na2 += a.grid[i] * a.grid[i];
    nb2 += b.grid[i] * b.grid[i];
  }
  const double denom = std::sqrt(na2) * std::sqrt(nb2);
  grad.assign(a.size(), 0.0);
  if (denom > kSimilarityEpsilon) {
    const double sim = dot / denom;
    for (std::size_t i = 0; i < a.size(); ++i) grad[i] = b.grid[i] / denom - sim * a.grid[i] / na2;
  } else {
    for (std::size_t i = 0; i < a.size(); ++i) grad[i] = b.grid[i] / kSimilarityEpsilon;
  }
}

// -log(e^sp / (e^sp + e^sn)), evaluated stably as softplus(sn - sp).
inline double contrastive_from_similarities(double sim_pos, double sim_neg) {
  const double z = sim_neg - sim_pos;
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline double contrastive_loss(const DensityMap& d_pos, const DensityMap& d_gt, const DensityMap& d_neg) {
  require_same_shape(d_pos, d_gt, "contrastive_loss");
  require_same_shape(d_neg, d_gt, "contrastive_loss");
  return contrastive_from_similarities(similarity(d_pos, d_gt), similarity(d_neg, d_gt));
}

inline double density_loss(const DensityMap& d_pos, const DensityMap& d_gt) {
  require_same_shape(d_pos, d_gt, "density_loss");
  double s = 0;
  for (std::size_t i = 0; i < d_pos.size(); ++i) {
    const double r = d_pos.grid[i] - d_gt.grid[i];
    s += r * r;
  }
  return s / static_cast<double>(d_pos.size());
}

struct LossReport {
  double l_c = 0;
  double l_d = 0;
  double l_total = 0;
  double sim_pos = 0;
  double sim_neg = 0;
  bool contrastive_active = false;
};

struct LossGradients {
  std::vector<double> d_pos;
  std::vector<double> d_neg;  // empty when the contrastive term is inactive
};

// Per-image objective L_C + L_D. Without a negative map the contrastive term is 0
// and flagged inactive.
inline LossReport total_loss(const DensityMap& d_pos, const DensityMap& d_gt,
                             const DensityMap* d_neg, LossGradients* grads = nullptr) {
  require_same_shape(d_pos, d_gt, "total_loss");
  if (d_neg) require_same_shape(*d_neg, d_gt, "total_loss");
  LossReport r;
  r.l_d = density_loss(d_pos, d_gt);
  r.sim_pos = similarity(d_pos, d_gt);
  const bool active = d_neg != nullptr;
  if (active) {
    r.sim_neg = similarity(*d_neg, d_gt);
    r.l_c = contrastive_from_similarities(r.sim_pos, r.sim_neg);
    r.contrastive_active = true;
  }
  r.l_total = r.l_c + r.l_d;

  if (grads) {
    const double n = static_cast<double>(d_pos.size());
    grads->d_pos.assign(d_pos.size(), 0.0);
    for (std::size_t i = 0; i < d_pos.size(); ++i) {
      grads->d_pos[i] = 2.0 * (d_pos.grid[i] - d_gt.grid[i]) / n;
    }
    grads->d_neg.clear();
    if (active) {
      // dL/dsn = sigmoid(sn - sp) = -dL/dsp
      const double g = 1.0 / (1.0 + std::exp(r.sim_pos - r.sim_neg));
      std::vector<double> ds;
      similarity_grad(d_pos, d_gt, ds);
      for (std::size_t i = 0; i < ds.size(); ++i) grads->d_pos[i] -= g * ds[i];
      similarity_grad(*d_neg, d_gt, ds);
      grads->d_neg.resize(ds.size());
      for (std::size_t i = 0; i < ds.size(); ++i) grads->d_neg[i] = g * ds[i];
    }
  }
  return r;
}

inline LossReport total_loss(const DensityMap& d_pos, const DensityMap& d_gt,
                             const std::optional<DensityMap>& d_neg) {
  return total_loss(d_pos, d_gt, d_neg ? &*d_neg : nullptr);
}

// Batch aggregation: mean over images of every component.
inline LossReport mean_report(std::span<const LossReport> reports) {
  LossReport m;
  if (reports.empty()) return m;
  std::size_t active = 0;
  for (const auto& r : reports) {
    m.l_c += r.l_c;
    m.l_d += r.l_d;
    m.l_total += r.l_total;
    m.sim_pos += r.sim_pos;
    m.sim_neg += r.sim_neg;
    active += r.contrastive_active ? 1 : 0;
  }
  const double n = static_cast<double>(reports.size());
  m.l_c /= n;
  m.l_d /= n;
  m.l_total /= n;
  m.sim_pos /= n;
  m.sim_neg /= n;
  m.contrastive_active = active > 0;
  return m;
}

}  // namespace excount
