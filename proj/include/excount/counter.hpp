#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "excount/density.hpp"
#include "excount/error.hpp"
#include "excount/image.hpp"
#include "excount/losses.hpp"
#include "excount/nn.hpp"

namespace excount {

using nn::Mat;
using nn::Vec;

// Token matrix (M x D, one token per row) with its spatial layout h_t x w_t.
struct FeatureMap {
  Mat tokens;
  int h_t = 0;
  int w_t = 0;

  Eigen::Index count() const { return tokens.rows(); }
  Eigen::Index dim() const { return tokens.cols(); }
};

// Desk-scale architecture. The image encoder downsamples by 16 with four stride-2
// convolutions; the decoder has four bilinear x2 + conv stages back to full size.
struct CounterConfig {
  int image_size = 64;
  int exemplar_size = 64;
  int embed_dim = 32;
  int heads = 1;
  int fusion_blocks = 1;
  int mlp_hidden = 64;
  std::array<int, 3> encoder_channels{8, 16, 16};
  std::array<int, 4> decoder_channels{32, 16, 16, 8};
  double output_bias_init = -4.0;
  double density_scale = 1.0;
  bool allow_empty_exemplars = true;
  bool pool_exemplars = true;  // one mean token per patch; false keeps the patch's token grid
  std::uint64_t seed = 0;

  friend bool operator==(const CounterConfig&, const CounterConfig&) = default;
};

inline void to_json(nlohmann::json& j, const CounterConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"exemplar_size", c.exemplar_size},
                     {"embed_dim", c.embed_dim},
                     {"heads", c.heads},
                     {"fusion_blocks", c.fusion_blocks},
                     {"mlp_hidden", c.mlp_hidden},
                     {"encoder_channels", c.encoder_channels},
                     {"decoder_channels", c.decoder_channels},
                     {"output_bias_init", c.output_bias_init},
                     {"density_scale", c.density_scale},
                     {"allow_empty_exemplars", c.allow_empty_exemplars},
                     {"pool_exemplars", c.pool_exemplars},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, CounterConfig& c) {
  c = CounterConfig{};
  c.image_size = j.value("image_size", c.image_size);
  c.exemplar_size = j.value("exemplar_size", c.exemplar_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.heads = j.value("heads", c.heads);
  c.fusion_blocks = j.value("fusion_blocks", c.fusion_blocks);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  if (j.contains("encoder_channels")) c.encoder_channels = j["encoder_channels"].get<std::array<int, 3>>();
  if (j.contains("decoder_channels")) c.decoder_channels = j["decoder_channels"].get<std::array<int, 4>>();
  c.output_bias_init = j.value("output_bias_init", c.output_bias_init);
  c.density_scale = j.value("density_scale", c.density_scale);
  c.allow_empty_exemplars = j.value("allow_empty_exemplars", c.allow_empty_exemplars);
  c.pool_exemplars = j.value("pool_exemplars", c.pool_exemplars);
  c.seed = j.value("seed", c.seed);
}

inline void validate(const CounterConfig& c) {
  if (c.image_size < 16 || c.image_size % 16 != 0) throw ConfigError("image_size must be a positive multiple of 16");
  if (c.exemplar_size < 16 || c.exemplar_size % 16 != 0) throw ConfigError("exemplar_size must be a positive multiple of 16");
  if (c.embed_dim <= 0 || c.heads <= 0 || c.embed_dim % c.heads != 0) throw ConfigError("embed_dim must be divisible by heads");
  if (c.fusion_blocks < 1 || c.mlp_hidden < 1) throw ConfigError("fusion_blocks and mlp_hidden must be positive");
  if (!(c.density_scale > 0)) throw ConfigError("density_scale must be positive");
}

// Image pixels as 3 planes, centered at 0.
inline nn::Planes image_planes(const Image& img) {
  nn::Planes p{Mat(3, static_cast<Eigen::Index>(img.width) * img.height), img.height, img.width};
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) p.data(c, static_cast<Eigen::Index>(y) * img.width + x) = img.at(x, y, c) - 0.5;
  return p;
}

namespace detail {

inline void softmax_rows(Mat& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp();
    s.row(i) /= s.row(i).sum();
  }
}

inline Mat colsum(const Mat& m) { return m.colwise().sum().transpose(); }

}  // namespace detail

// Intermediates kept by the forward pass for the backward pass.
struct EncoderTape {
  std::array<nn::ConvCache, 4> conv;
  std::array<Mat, 3> pre;  // pre-activations of the first three stages
};

struct FusionBlockTape {
  Mat query;                  // block input, M x D
  Mat exemplars;              // N x D
  Mat keys, values;           // N x D
  std::vector<Mat> attention; // per head, M x N
  Mat hidden_pre;             // M x mlp_hidden
  Mat hidden;                 // gelu(hidden_pre)
  Mat fused;                  // query + attention output
};

struct FusionTape {
  std::vector<FusionBlockTape> blocks;
  bool bypassed = false;
};

struct DecoderTape {
  int h_t = 0, w_t = 0;
  std::array<nn::ConvCache, 4> conv;
  std::array<Mat, 4> pre;
  std::array<std::pair<int, int>, 4> up_in;  // (h, w) before each upsampling
  nn::ConvCache out_conv;
  Mat out_pre;  // 1 x HW
};

struct StreamTape {
  std::vector<EncoderTape> exemplar_enc;
  FusionTape fusion;
  DecoderTape decoder;
};

class Counter {
 public:
  Counter() : Counter(CounterConfig{}) {}

  explicit Counter(const CounterConfig& cfg) : cfg_(cfg) {
    validate(cfg_);
    std::mt19937_64 rng(cfg_.seed * 0x9e3779b97f4a7c15ull + 17);
    add_encoder("img_enc", rng);
    add_encoder("ex_enc", rng);
    const int D = cfg_.embed_dim;
    for (int b = 0; b < cfg_.fusion_blocks; ++b) {
      const std::string p = "fuse." + std::to_string(b) + ".";
      add(p + "wk", nn::random_normal(D, D, 1.0 / std::sqrt(D), rng));
      add(p + "wv", nn::random_normal(D, D, 1.0 / std::sqrt(D), rng));
      add(p + "mlp1.w", nn::random_normal(cfg_.mlp_hidden, D, std::sqrt(2.0 / D), rng));
      add(p + "mlp1.b", Mat::Zero(cfg_.mlp_hidden, 1), false);
      add(p + "mlp2.w", nn::random_normal(D, cfg_.mlp_hidden, std::sqrt(1.0 / cfg_.mlp_hidden), rng));
      add(p + "mlp2.b", Mat::Zero(D, 1), false);
    }
    int in = D;
    for (int s = 0; s < 4; ++s) {
      const int out = cfg_.decoder_channels[s];
      add("dec." + std::to_string(s) + ".w", nn::random_normal(out, in * 9, std::sqrt(2.0 / (in * 9)), rng));
      add("dec." + std::to_string(s) + ".b", Mat::Zero(out, 1), false);
      in = out;
    }
    add("out.w", nn::random_normal(1, in, std::sqrt(1.0 / in), rng));
    add("out.b", Mat::Constant(1, 1, cfg_.output_bias_init), false);
  }

  const CounterConfig& config() const { return cfg_; }
  std::vector<nn::Param>& params() { return params_; }
  const std::vector<nn::Param>& params() const { return params_; }

  nn::Param& param(const std::string& name) { return params_.at(index_.at(name)); }
  const nn::Param& param(const std::string& name) const { return params_.at(index_.at(name)); }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // ---- encoders ----------------------------------------------------------

  FeatureMap encode_image(const Image& img, EncoderTape* tape = nullptr) const {
    if (img.width != cfg_.image_size || img.height != cfg_.image_size) {
      throw ShapeError("counter expects " + std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_size) +
                       " images, got " + std::to_string(img.width) + "x" + std::to_string(img.height));
    }
    return encode("img_enc", image_planes(img), tape);
  }

  // Tokens of all exemplar patches stacked along the token axis: one pooled token
  // per patch, or its whole grid. Patches are resized to exemplar_size.
  int tokens_per_exemplar() const {
    const int side = cfg_.exemplar_size / 16;
    return cfg_.pool_exemplars ? 1 : side * side;
  }

  FeatureMap encode_exemplars(const std::vector<Image>& patches, std::vector<EncoderTape>* tapes = nullptr) const {
    const int per = tokens_per_exemplar();
    FeatureMap out;
    out.tokens = Mat::Zero(static_cast<Eigen::Index>(patches.size()) * per, cfg_.embed_dim);
    out.h_t = static_cast<int>(patches.size()) * per;
    out.w_t = 1;
    if (tapes) tapes->assign(patches.size(), {});
    for (std::size_t i = 0; i < patches.size(); ++i) {
      const Image& p = patches[i];
      const Image sized = (p.width == cfg_.exemplar_size && p.height == cfg_.exemplar_size)
                              ? p
                              : resize(p, cfg_.exemplar_size, cfg_.exemplar_size);
      const FeatureMap f = encode("ex_enc", image_planes(sized), tapes ? &(*tapes)[i] : nullptr);
      if (cfg_.pool_exemplars) {
        out.tokens.row(static_cast<Eigen::Index>(i)) = f.tokens.colwise().mean();
      } else {
        out.tokens.middleRows(static_cast<Eigen::Index>(i) * per, per) = f.tokens;
      }
    }
    return out;
  }

  // ---- fusion ------------------------------------------------------------

  // Cross-attention with image tokens as queries and projected exemplar tokens as
  // keys/values, plus a residual token MLP. No exemplar tokens: identity.
  FeatureMap fuse(const FeatureMap& query, const FeatureMap& exemplars, FusionTape* tape = nullptr) const {
    const int D = cfg_.embed_dim;
    if (query.dim() != D || (exemplars.count() > 0 && exemplars.dim() != D)) {
      throw ShapeError("fuse: query " + std::to_string(query.count()) + "x" + std::to_string(query.dim()) +
                       " and exemplars " + std::to_string(exemplars.count()) + "x" + std::to_string(exemplars.dim()) +
                       " incompatible with embed dim " + std::to_string(D));
    }
    if (tape) *tape = {};
    if (exemplars.count() == 0) {
      if (tape) tape->bypassed = true;
      return query;
    }
    const int dh = D / cfg_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Mat x = query.tokens;
    for (int b = 0; b < cfg_.fusion_blocks; ++b) {
      const std::string p = "fuse." + std::to_string(b) + ".";
      FusionBlockTape bt;
      bt.query = x;
      bt.exemplars = exemplars.tokens;
      bt.keys = exemplars.tokens * param(p + "wk").value.transpose();
      bt.values = exemplars.tokens * param(p + "wv").value.transpose();
      Mat attn_out(x.rows(), D);
      for (int h = 0; h < cfg_.heads; ++h) {
        Mat s = scale * x.middleCols(h * dh, dh) * bt.keys.middleCols(h * dh, dh).transpose();
        detail::softmax_rows(s);
        attn_out.middleCols(h * dh, dh) = s * bt.values.middleCols(h * dh, dh);
        bt.attention.push_back(std::move(s));
      }
      bt.fused = x + attn_out;
      bt.hidden_pre = bt.fused * param(p + "mlp1.w").value.transpose();
      bt.hidden_pre.rowwise() += param(p + "mlp1.b").value.col(0).transpose();
      bt.hidden = nn::apply_gelu(bt.hidden_pre);
      x = bt.fused + bt.hidden * param(p + "mlp2.w").value.transpose();
      x.rowwise() += param(p + "mlp2.b").value.col(0).transpose();
      if (tape) tape->blocks.push_back(std::move(bt));
    }
    return {x, query.h_t, query.w_t};
  }

  // ---- decoder -----------------------------------------------------------

  DensityMap decode(const FeatureMap& f, DecoderTape* tape = nullptr) const {
    nn::Planes x{f.tokens.transpose(), f.h_t, f.w_t};
    if (tape) {
      tape->h_t = f.h_t;
      tape->w_t = f.w_t;
    }
    for (int s = 0; s < 4; ++s) {
      const std::string p = "dec." + std::to_string(s) + ".";
      if (tape) tape->up_in[s] = {x.height, x.width};
      const nn::Planes up = nn::upsample2x(x);
      nn::Planes pre = nn::conv2d(up, param(p + "w").value, param(p + "b").value.col(0), 3, 1, 1,
                                  tape ? &tape->conv[s] : nullptr);
      x = {nn::apply_gelu(pre.data), pre.height, pre.width};
      if (tape) tape->pre[s] = std::move(pre.data);
    }
    const nn::Planes out = nn::conv2d(x, param("out.w").value, param("out.b").value.col(0), 1, 1, 0,
                                      tape ? &tape->out_conv : nullptr);
    DensityMap d(out.height, out.width, cfg_.density_scale);
    for (std::size_t i = 0; i < d.grid.size(); ++i) d.grid[i] = nn::softplus(out.data(0, static_cast<Eigen::Index>(i)));
    if (tape) tape->out_pre = out.data;
    return d;
  }

  // ---- end to end --------------------------------------------------------

  DensityMap forward(const Image& img, const std::vector<Image>& exemplar_patches) const {
    if (exemplar_patches.empty() && !cfg_.allow_empty_exemplars) {
      throw UsageError("forward: no exemplar patches and the identity bypass is disabled");
    }
    const FeatureMap q = encode_image(img);
    return decode(fuse(q, encode_exemplars(exemplar_patches)));
  }

  // Runs one conditioned stream on precomputed image tokens, keeping the tape.
  DensityMap forward_stream(const FeatureMap& image_tokens, const std::vector<Image>& patches, StreamTape& tape) const {
    if (patches.empty() && !cfg_.allow_empty_exemplars) {
      throw UsageError("forward: no exemplar patches and the identity bypass is disabled");
    }
    const FeatureMap e = encode_exemplars(patches, &tape.exemplar_enc);
    return decode(fuse(image_tokens, e, &tape.fusion), &tape.decoder);
  }

  // ---- backward ----------------------------------------------------------

  // Gradient of the loss w.r.t. the density grid -> gradient w.r.t. fused tokens.
  Mat decode_backward(const std::vector<double>& d_density, const DecoderTape& tape) {
    Mat dpre(1, static_cast<Eigen::Index>(d_density.size()));
    for (std::size_t i = 0; i < d_density.size(); ++i) {
      dpre(0, static_cast<Eigen::Index>(i)) = d_density[i] * nn::sigmoid(tape.out_pre(0, static_cast<Eigen::Index>(i)));
    }
    nn::Planes dx = conv_backward("out", dpre, tape.out_conv);
    for (int s = 3; s >= 0; --s) {
      const std::string p = "dec." + std::to_string(s);
      const Mat dpre_s = nn::gelu_backward(tape.pre[s], dx.data);
      const nn::Planes dup = conv_backward(p, dpre_s, tape.conv[s]);
      dx = nn::upsample2x_backward(dup.data, tape.up_in[s].first, tape.up_in[s].second);
    }
    return dx.data.transpose();  // M x D
  }

  // Returns (d query tokens, d exemplar tokens).
  std::pair<Mat, Mat> fuse_backward(const Mat& d_out, const FusionTape& tape) {
    if (tape.bypassed) return {d_out, Mat(0, cfg_.embed_dim)};
    const int D = cfg_.embed_dim;
    const int dh = D / cfg_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Mat dx = d_out;
    Mat d_ex = Mat::Zero(tape.blocks.front().exemplars.rows(), D);
    for (int b = cfg_.fusion_blocks - 1; b >= 0; --b) {
      const FusionBlockTape& bt = tape.blocks[b];
      const std::string p = "fuse." + std::to_string(b) + ".";
      nn::Param& w1 = param(p + "mlp1.w");
      nn::Param& b1 = param(p + "mlp1.b");
      nn::Param& w2 = param(p + "mlp2.w");
      nn::Param& b2 = param(p + "mlp2.b");
      w2.grad.noalias() += dx.transpose() * bt.hidden;
      b2.grad += detail::colsum(dx);
      const Mat dhidden_pre = nn::gelu_backward(bt.hidden_pre, dx * w2.value);
      w1.grad.noalias() += dhidden_pre.transpose() * bt.fused;
      b1.grad += detail::colsum(dhidden_pre);
      const Mat dfused = dx + dhidden_pre * w1.value;

      Mat dquery = dfused;
      Mat dkeys = Mat::Zero(bt.keys.rows(), D);
      Mat dvalues = Mat::Zero(bt.values.rows(), D);
      for (int h = 0; h < cfg_.heads; ++h) {
        const Mat& a = bt.attention[h];
        const Mat d_o = dfused.middleCols(h * dh, dh);
        dvalues.middleCols(h * dh, dh) = a.transpose() * d_o;
        const Mat da = d_o * bt.values.middleCols(h * dh, dh).transpose();
        const Vec rowdot = (da.cwiseProduct(a)).rowwise().sum();
        Mat ds = a.cwiseProduct(da.colwise() - rowdot);
        ds *= scale;
        dquery.middleCols(h * dh, dh) += ds * bt.keys.middleCols(h * dh, dh);
        dkeys.middleCols(h * dh, dh) = ds.transpose() * bt.query.middleCols(h * dh, dh);
      }
      nn::Param& wk = param(p + "wk");
      nn::Param& wv = param(p + "wv");
      wk.grad.noalias() += dkeys.transpose() * bt.exemplars;
      wv.grad.noalias() += dvalues.transpose() * bt.exemplars;
      d_ex += dkeys * wk.value + dvalues * wv.value;
      dx = dquery;
    }
    return {dx, d_ex};
  }

  void encode_exemplars_backward(const Mat& d_tokens, const std::vector<EncoderTape>& tapes) {
    for (std::size_t i = 0; i < tapes.size(); ++i) {
      const EncoderTape& t = tapes[i];
      const int m = t.conv[3].geom.out_h() * t.conv[3].geom.out_w();
      if (!cfg_.pool_exemplars) {
        encode_backward("ex_enc", d_tokens.middleRows(static_cast<Eigen::Index>(i) * m, m), t);
        continue;
      }
      const Mat d_row = d_tokens.row(static_cast<Eigen::Index>(i)) / m;
      Mat dtok = d_row.replicate(m, 1);  // mean-pool backward
      encode_backward("ex_enc", dtok, t);
    }
  }

  void encode_image_backward(const Mat& d_tokens, const EncoderTape& tape) { encode_backward("img_enc", d_tokens, tape); }

  // Backward of one stream; returns the gradient w.r.t. the shared image tokens.
  Mat stream_backward(const std::vector<double>& d_density, const StreamTape& tape) {
    const Mat d_fused = decode_backward(d_density, tape.decoder);
    auto [d_query, d_ex] = fuse_backward(d_fused, tape.fusion);
    if (!tape.exemplar_enc.empty()) encode_exemplars_backward(d_ex, tape.exemplar_enc);
    return d_query;
  }

  // Full objective for one image: positive stream, optional negative stream
  // through the same weights, L_total, and accumulated parameter gradients.
  LossReport accumulate(const Image& img, const DensityMap& gt, const std::vector<Image>& positives,
                        const std::vector<Image>* negatives, DensityMap* d_pos_out = nullptr,
                        DensityMap* d_neg_out = nullptr) {
    EncoderTape img_tape;
    const FeatureMap q = encode_image(img, &img_tape);
    StreamTape pos_tape, neg_tape;
    const DensityMap d_pos = forward_stream(q, positives, pos_tape);
    std::optional<DensityMap> d_neg;
    if (negatives) d_neg = forward_stream(q, *negatives, neg_tape);
    LossGradients g;
    const LossReport r = total_loss(d_pos, gt, d_neg ? &*d_neg : nullptr, &g);
    Mat d_query = stream_backward(g.d_pos, pos_tape);
    if (d_neg) d_query += stream_backward(g.d_neg, neg_tape);
    encode_image_backward(d_query, img_tape);
    if (d_pos_out) *d_pos_out = d_pos;
    if (d_neg_out && d_neg) *d_neg_out = *d_neg;
    return r;
  }

 private:
  void add(const std::string& name, Mat value, bool decay = true) {
    index_[name] = params_.size();
    nn::Param p;
    p.name = name;
    p.value = std::move(value);
    p.decay = decay;
    p.zero_grad();
    params_.push_back(std::move(p));
  }

  void add_encoder(const std::string& prefix, std::mt19937_64& rng) {
    int in = 3;
    for (int s = 0; s < 4; ++s) {
      const int out = s < 3 ? cfg_.encoder_channels[s] : cfg_.embed_dim;
      const double std = s < 3 ? std::sqrt(2.0 / (in * 9)) : std::sqrt(1.0 / (in * 9));
      add(prefix + "." + std::to_string(s) + ".w", nn::random_normal(out, in * 9, std, rng));
      add(prefix + "." + std::to_string(s) + ".b", Mat::Zero(out, 1), false);
      in = out;
    }
  }

  FeatureMap encode(const std::string& prefix, nn::Planes x, EncoderTape* tape) const {
    for (int s = 0; s < 4; ++s) {
      const std::string p = prefix + "." + std::to_string(s) + ".";
      nn::Planes pre = nn::conv2d(x, param(p + "w").value, param(p + "b").value.col(0), 3, 2, 1,
                                  tape ? &tape->conv[s] : nullptr);
      if (s < 3) {
        x = {nn::apply_gelu(pre.data), pre.height, pre.width};
        if (tape) tape->pre[s] = std::move(pre.data);
      } else {
        x = std::move(pre);
      }
    }
    return {x.data.transpose(), x.height, x.width};
  }

  void encode_backward(const std::string& prefix, const Mat& d_tokens, const EncoderTape& tape) {
    Mat dx = d_tokens.transpose();
    for (int s = 3; s >= 0; --s) {
      if (s < 3) dx = nn::gelu_backward(tape.pre[s], dx);
      const std::string p = prefix + "." + std::to_string(s);
      // The encoder input gradient of the first stage is not needed.
      nn::Param& w = param(p + ".w");
      nn::Param& b = param(p + ".b");
      w.grad.noalias() += dx * tape.conv[s].cols.transpose();
      b.grad += dx.rowwise().sum();
      if (s > 0) dx = nn::col2im(w.value.transpose() * dx, tape.conv[s].in_channels, tape.conv[s].geom).data;
    }
  }

  nn::Planes conv_backward(const std::string& prefix, const Mat& dy, const nn::ConvCache& cache) {
    nn::Param& w = param(prefix + ".w");
    nn::Param& b = param(prefix + ".b");
    Vec db = Vec::Zero(b.value.rows());
    nn::Planes dx = nn::conv2d_backward(dy, cache, w.value, w.grad, db);
    b.grad.col(0) += db;
    return dx;
  }

  CounterConfig cfg_;
  std::vector<nn::Param> params_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Checkpoint file:
//   "XCKP" | u32 version | u32 json_len | json (architecture + metadata)
//   | u32 n_tensors | n x (u32 name_len | name | u32 rows | u32 cols | rows*cols f32, row-major)
// All integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string write_checkpoint(const Counter& counter, const nlohmann::json& metadata = nlohmann::json::object()) {
  nlohmann::json header{{"architecture", counter.config()}, {"metadata", metadata}};
  const std::string js = header.dump();
  std::string out = "XCKP";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(js.size()));
  out += js;
  detail::put_u32(out, static_cast<std::uint32_t>(counter.params().size()));
  for (const auto& p : counter.params()) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    detail::put_u32(out, static_cast<std::uint32_t>(p.value.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(p.value.cols()));
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) detail::put_f32(out, static_cast<float>(p.value(r, c)));
  }
  return out;
}

struct LoadedCheckpoint {
  Counter counter;
  nlohmann::json metadata;
};

inline LoadedCheckpoint read_checkpoint(const std::string& bytes) {
  std::size_t off = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() < off + n) {
      throw FormatError(std::string("checkpoint: truncated ") + what + " at offset " + std::to_string(off));
    }
  };
  auto u32 = [&](const char* what) {
    need(4, what);
    const std::uint32_t v = detail::get_u32(bytes, off);
    off += 4;
    return v;
  };
  need(4, "magic");
  if (bytes.compare(0, 4, "XCKP") != 0) throw FormatError("checkpoint: bad magic at offset 0");
  off = 4;
  const std::uint32_t version = u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " at offset 4");
  }
  const std::uint32_t jlen = u32("header length");
  need(jlen, "header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(off, jlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint: malformed header at offset " + std::to_string(off) + ": " + e.what());
  }
  off += jlen;
  LoadedCheckpoint ck{Counter(header.at("architecture").get<CounterConfig>()), header.value("metadata", nlohmann::json::object())};
  const std::uint32_t n = u32("tensor count");
  if (n != ck.counter.params().size()) {
    throw FormatError("checkpoint: expected " + std::to_string(ck.counter.params().size()) + " tensors, found " +
                      std::to_string(n) + " at offset " + std::to_string(off - 4));
  }
  for (std::uint32_t t = 0; t < n; ++t) {
    const std::size_t rec_off = off;
    const std::uint32_t name_len = u32("tensor name length");
    need(name_len, "tensor name");
    const std::string name = bytes.substr(off, name_len);
    off += name_len;
    nn::Param* p = nullptr;
    for (auto& q : ck.counter.params())
      if (q.name == name) p = &q;
    if (!p) throw FormatError("checkpoint: unknown tensor '" + name + "' at offset " + std::to_string(rec_off));
    const std::uint32_t rows = u32("tensor rows");
    const std::uint32_t cols = u32("tensor cols");
    if (rows != p->value.rows() || cols != p->value.cols()) {
      throw FormatError("checkpoint: tensor '" + name + "' shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                        " does not match architecture at offset " + std::to_string(rec_off));
    }
    need(4ull * rows * cols, "tensor payload");
    for (std::uint32_t r = 0; r < rows; ++r) {
      for (std::uint32_t c = 0; c < cols; ++c) {
        p->value(r, c) = detail::get_f32(bytes, off);
        off += 4;
      }
    }
  }
  if (off != bytes.size()) throw FormatError("checkpoint: trailing bytes at offset " + std::to_string(off));
  return ck;
}

}  // namespace excount
