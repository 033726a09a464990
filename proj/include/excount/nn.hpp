#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "excount/error.hpp"

namespace excount::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Feature planes: rows are channels, columns are pixels in row-major (y * width + x).
struct Planes {
  Mat data;
  int height = 0;
  int width = 0;

  int channels() const { return static_cast<int>(data.rows()); }
};

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM). Weight is Cout x (Cin * k * k), column index
// c * k * k + ky * k + kx.

struct ConvGeometry {
  int in_h, in_w, k, stride, pad;
  int out_h() const { return (in_h + 2 * pad - k) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - k) / stride + 1; }
};

inline Mat im2col(const Planes& x, const ConvGeometry& g) {
  const int C = x.channels(), oh = g.out_h(), ow = g.out_w();
  Mat cols = Mat::Zero(static_cast<Eigen::Index>(C) * g.k * g.k, static_cast<Eigen::Index>(oh) * ow);
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(c) * g.k + ky) * g.k + kx;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.in_w) continue;
            cols(row, static_cast<Eigen::Index>(oy) * ow + ox) = x.data(c, static_cast<Eigen::Index>(iy) * g.in_w + ix);
          }
        }
      }
    }
  }
  return cols;
}

inline Planes col2im(const Mat& cols, int channels, const ConvGeometry& g) {
  const int oh = g.out_h(), ow = g.out_w();
  Planes x{Mat::Zero(channels, static_cast<Eigen::Index>(g.in_h) * g.in_w), g.in_h, g.in_w};
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(c) * g.k + ky) * g.k + kx;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.in_w) continue;
            x.data(c, static_cast<Eigen::Index>(iy) * g.in_w + ix) += cols(row, static_cast<Eigen::Index>(oy) * ow + ox);
          }
        }
      }
    }
  }
  return x;
}

struct ConvCache {
  Mat cols;
  ConvGeometry geom;
  int in_channels = 0;
};

inline Planes conv2d(const Planes& x, const Mat& weight, const Vec& bias, int k, int stride, int pad,
                     ConvCache* cache = nullptr) {
  const ConvGeometry g{x.height, x.width, k, stride, pad};
  if (weight.cols() != static_cast<Eigen::Index>(x.channels()) * k * k) {
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.cols() / (k * k)) +
                     " input channels, got " + std::to_string(x.channels()));
  }
  Mat cols = im2col(x, g);
  Planes y{weight * cols, g.out_h(), g.out_w()};
  y.data.colwise() += bias;
  if (cache) {
    cache->cols = std::move(cols);
    cache->geom = g;
    cache->in_channels = x.channels();
  }
  return y;
}

// Accumulates weight/bias gradients; returns the input gradient.
inline Planes conv2d_backward(const Mat& dy, const ConvCache& cache, const Mat& weight, Mat& dweight,
                              Vec& dbias) {
  dweight.noalias() += dy * cache.cols.transpose();
  dbias += dy.rowwise().sum();
  const Mat dcols = weight.transpose() * dy;
  return col2im(dcols, cache.in_channels, cache.geom);
}

// ---------------------------------------------------------------------------
// Elementwise activations

// tanh-approximated GELU; smooth everywhere.
inline double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  const double u = c * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Mat apply_gelu(const Mat& x) { return x.unaryExpr([](double v) { return gelu(v); }); }
inline Mat gelu_backward(const Mat& pre, const Mat& dy) {
  return dy.cwiseProduct(pre.unaryExpr([](double v) { return gelu_grad(v); }));
}

// ---------------------------------------------------------------------------
// Bilinear x2 upsampling (half-pixel centers, edge clamped), separable.

struct Taps {
  std::vector<int> i0, i1;
  std::vector<double> w1;  // weight of i1; i0 gets 1 - w1
};

inline Taps upsample_taps(int in, int out) {
  Taps t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.w1.resize(out);
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = i0 + 1 < in ? i0 + 1 : i0;
    t.i0[o] = i0;
    t.i1[o] = i1;
    t.w1[o] = src - i0;
  }
  return t;
}

inline Planes upsample2x(const Planes& x) {
  const int oh = 2 * x.height, ow = 2 * x.width;
  const Taps ty = upsample_taps(x.height, oh), tx = upsample_taps(x.width, ow);
  Planes y{Mat::Zero(x.channels(), static_cast<Eigen::Index>(oh) * ow), oh, ow};
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const double wy1 = ty.w1[oy], wx1 = tx.w1[ox];
      const Eigen::Index o = static_cast<Eigen::Index>(oy) * ow + ox;
      const Eigen::Index a = static_cast<Eigen::Index>(ty.i0[oy]) * x.width + tx.i0[ox];
      const Eigen::Index b = static_cast<Eigen::Index>(ty.i0[oy]) * x.width + tx.i1[ox];
      const Eigen::Index c = static_cast<Eigen::Index>(ty.i1[oy]) * x.width + tx.i0[ox];
      const Eigen::Index d = static_cast<Eigen::Index>(ty.i1[oy]) * x.width + tx.i1[ox];
      y.data.col(o) = (1 - wy1) * ((1 - wx1) * x.data.col(a) + wx1 * x.data.col(b)) +
                      wy1 * ((1 - wx1) * x.data.col(c) + wx1 * x.data.col(d));
    }
  }
  return y;
}

inline Planes upsample2x_backward(const Mat& dy, int in_h, int in_w) {
  const int oh = 2 * in_h, ow = 2 * in_w;
  const Taps ty = upsample_taps(in_h, oh), tx = upsample_taps(in_w, ow);
  Planes dx{Mat::Zero(dy.rows(), static_cast<Eigen::Index>(in_h) * in_w), in_h, in_w};
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const double wy1 = ty.w1[oy], wx1 = tx.w1[ox];
      const Eigen::Index o = static_cast<Eigen::Index>(oy) * ow + ox;
      dx.data.col(static_cast<Eigen::Index>(ty.i0[oy]) * in_w + tx.i0[ox]) += (1 - wy1) * (1 - wx1) * dy.col(o);
      dx.data.col(static_cast<Eigen::Index>(ty.i0[oy]) * in_w + tx.i1[ox]) += (1 - wy1) * wx1 * dy.col(o);
      dx.data.col(static_cast<Eigen::Index>(ty.i1[oy]) * in_w + tx.i0[ox]) += wy1 * (1 - wx1) * dy.col(o);
      dx.data.col(static_cast<Eigen::Index>(ty.i1[oy]) * in_w + tx.i1[ox]) += wy1 * wx1 * dy.col(o);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Parameters and the decoupled-weight-decay Adam optimizer.

struct Param {
  std::string name;
  Mat value;
  Mat grad;
  Mat m;  // first moment
  Mat v;  // second moment
  bool decay = true;  // biases are excluded from weight decay

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

struct AdamWConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  // One update with gradients averaged over `batch` samples.
  void step(std::vector<Param>& params, double batch = 1.0) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (auto& p : params) {
      if (p.m.size() != p.value.size()) {
        p.m = Mat::Zero(p.value.rows(), p.value.cols());
        p.v = Mat::Zero(p.value.rows(), p.value.cols());
      }
      const Mat g = p.grad / batch;
      p.m = cfg_.beta1 * p.m + (1 - cfg_.beta1) * g;
      p.v = cfg_.beta2 * p.v + (1 - cfg_.beta2) * g.cwiseProduct(g);
      if (cfg_.lr == 0.0) continue;
      const Mat update = (p.m / bc1).array() / ((p.v / bc2).array().sqrt() + cfg_.eps);
      if (p.decay && cfg_.weight_decay != 0.0) p.value -= cfg_.lr * cfg_.weight_decay * p.value;
      p.value -= cfg_.lr * update;
    }
  }

  long steps() const { return t_; }
  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  AdamWConfig cfg_;
  long t_ = 0;
};

inline Mat random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

}  // namespace excount::nn
