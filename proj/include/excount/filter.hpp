#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "excount/dataset.hpp"
#include "excount/density.hpp"
#include "excount/error.hpp"
#include "excount/image.hpp"
#include "excount/nn.hpp"
#include "excount/scene.hpp"

namespace excount {

enum class PatchLabel { Single = 0, Multi = 1 };

inline const char* label_name(PatchLabel l) { return l == PatchLabel::Single ? "single" : "multi"; }

struct Verdict {
  PatchLabel label = PatchLabel::Multi;
  double confidence = 0;
  double p_single = 0;
  double p_multi = 0;
};

// Anything that can judge whether a patch holds exactly one object.
class PatchClassifier {
 public:
  virtual ~PatchClassifier() = default;
  virtual Verdict classify(const Image& patch) const = 0;
};

// Frozen feature extractor. Identical input must give identical output.
class EmbeddingBackbone {
 public:
  virtual ~EmbeddingBackbone() = default;
  virtual int embed_dim() const = 0;
  virtual int input_size() const = 0;
  virtual Eigen::VectorXd embed(const Image& patch) const = 0;
  virtual std::uint64_t fingerprint() const = 0;
};

// Training-free featurizer: a foreground map (distance from the patch's border
// colour) summarized by a seeded random projection plus pooled histograms
// (spatial pyramid occupancy, value histogram, gradient orientations, and
// per-row/column foreground run counts).
class RandomProjectionBackbone final : public EmbeddingBackbone {
 public:
  static constexpr int kGrid = 16;
  static constexpr int kProjDim = 48;

  explicit RandomProjectionBackbone(std::uint64_t seed = 7, int input_size = 32)
      : seed_(seed), input_size_(input_size) {
    std::mt19937_64 rng(mix_seed(seed, 0xbacb0e));
    std::normal_distribution<double> n(0.0, 1.0 / kGrid);
    projection_.resize(kProjDim, kGrid * kGrid);
    for (Eigen::Index j = 0; j < projection_.cols(); ++j)
      for (Eigen::Index i = 0; i < projection_.rows(); ++i) projection_(i, j) = n(rng);
  }

  int embed_dim() const override { return kProjDim + 21 + 8 + 8 + 8; }
  int input_size() const override { return input_size_; }
  std::uint64_t fingerprint() const override { return mix_seed(seed_, static_cast<std::uint64_t>(input_size_)); }

  Eigen::VectorXd embed(const Image& patch) const override {
    const Image img = (patch.width == input_size_ && patch.height == input_size_)
                          ? patch
                          : resize(patch, input_size_, input_size_);
    const int n = input_size_;
    // Background colour: median of the border pixels per channel.
    std::array<float, 3> bg{};
    for (int c = 0; c < 3; ++c) {
      std::vector<float> border;
      for (int i = 0; i < n; ++i) {
        border.push_back(img.at(i, 0, c));
        border.push_back(img.at(i, n - 1, c));
        border.push_back(img.at(0, i, c));
        border.push_back(img.at(n - 1, i, c));
      }
      std::nth_element(border.begin(), border.begin() + border.size() / 2, border.end());
      bg[c] = border[border.size() / 2];
    }
    std::vector<double> fg(static_cast<std::size_t>(n) * n);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        double d2 = 0;
        for (int c = 0; c < 3; ++c) d2 += std::pow(img.at(x, y, c) - bg[c], 2.0);
        fg[static_cast<std::size_t>(y) * n + x] = std::min(1.0, std::sqrt(d2) / 0.4);
      }
    }
    auto fg_at = [&](int x, int y) { return fg[static_cast<std::size_t>(y) * n + x]; };

    Eigen::VectorXd out(embed_dim());
    int k = 0;
    // Random projection of the downsampled foreground map.
    Eigen::VectorXd coarse(kGrid * kGrid);
    const int cell = n / kGrid;
    for (int gy = 0; gy < kGrid; ++gy) {
      for (int gx = 0; gx < kGrid; ++gx) {
        double s = 0;
        for (int y = gy * cell; y < (gy + 1) * cell; ++y)
          for (int x = gx * cell; x < (gx + 1) * cell; ++x) s += fg_at(x, y);
        coarse(gy * kGrid + gx) = s / (cell * cell);
      }
    }
    out.segment(k, kProjDim) = (projection_ * coarse).array().tanh();
    k += kProjDim;
    // Spatial pyramid occupancy: 1x1, 2x2, 4x4.
    for (int level : {1, 2, 4}) {
      const int side = n / level;
      for (int cy = 0; cy < level; ++cy) {
        for (int cx = 0; cx < level; ++cx) {
          double s = 0;
          for (int y = cy * side; y < (cy + 1) * side; ++y)
            for (int x = cx * side; x < (cx + 1) * side; ++x) s += fg_at(x, y);
          out(k++) = s / (side * side);
        }
      }
    }
    // Foreground value histogram.
    Eigen::VectorXd hist = Eigen::VectorXd::Zero(8);
    for (double v : fg) hist(std::min(7, static_cast<int>(v * 8))) += 1.0;
    out.segment(k, 8) = hist / static_cast<double>(fg.size());
    k += 8;
    // Magnitude-weighted gradient orientation histogram.
    Eigen::VectorXd orient = Eigen::VectorXd::Zero(8);
    double total_mag = 1e-9;
    for (int y = 1; y < n - 1; ++y) {
      for (int x = 1; x < n - 1; ++x) {
        const double gx = fg_at(x + 1, y) - fg_at(x - 1, y);
        const double gy = fg_at(x, y + 1) - fg_at(x, y - 1);
        const double mag = std::hypot(gx, gy);
        if (mag < 1e-6) continue;
        double a = std::atan2(gy, gx);
        if (a < 0) a += 2 * std::numbers::pi;
        orient(std::min(7, static_cast<int>(a / (2 * std::numbers::pi) * 8))) += mag;
        total_mag += mag;
      }
    }
    out.segment(k, 8) = orient / total_mag;
    k += 8;
    // Runs of foreground along rows and columns, histogrammed as 0,1,2,3+.
    Eigen::VectorXd runs = Eigen::VectorXd::Zero(8);
    for (int axis = 0; axis < 2; ++axis) {
      for (int i = 0; i < n; ++i) {
        int count = 0;
        bool inside = false;
        for (int j = 0; j < n; ++j) {
          const bool on = (axis == 0 ? fg_at(j, i) : fg_at(i, j)) > 0.5;
          if (on && !inside) ++count;
          inside = on;
        }
        runs(axis * 4 + std::min(count, 3)) += 1.0 / n;
      }
    }
    out.segment(k, 8) = runs;
    return out;
  }

 private:
  std::uint64_t seed_;
  int input_size_;
  Eigen::MatrixXd projection_;
};

// Two affine layers with a rectifier between and a 2-way softmax output.
// Inputs are standardized with the training-set feature statistics.
struct FilterHead {
  Eigen::VectorXd mean, stddev;
  Eigen::MatrixXd w1;  // hidden x dim
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;  // 2 x hidden
  Eigen::VectorXd b2;
  std::uint64_t backbone_fingerprint = 0;

  bool initialized() const { return w1.size() > 0 && w2.rows() == 2; }
  int dim() const { return static_cast<int>(w1.cols()); }
  int hidden() const { return static_cast<int>(w1.rows()); }

  // Probability pair (p_single, p_multi).
  Eigen::Vector2d probabilities(const Eigen::VectorXd& embedding) const {
    if (!initialized()) throw UsageError("filter head is not trained");
    if (embedding.size() != dim()) {
      throw ShapeError("filter head expects " + std::to_string(dim()) + "-d embeddings, got " +
                       std::to_string(embedding.size()));
    }
    const Eigen::VectorXd x = (embedding - mean).cwiseQuotient(stddev);
    const Eigen::VectorXd h = (w1 * x + b1).cwiseMax(0.0);
    const Eigen::Vector2d z = w2 * h + b2;
    const double mx = z.maxCoeff();
    Eigen::Vector2d e = (z.array() - mx).exp();
    return e / e.sum();
  }
};

inline Verdict classify(const Image& patch, const EmbeddingBackbone& backbone, const FilterHead& head) {
  if (!head.initialized()) throw UsageError("filter head is not trained");
  const Eigen::Vector2d p = head.probabilities(backbone.embed(patch));
  Verdict v;
  v.p_single = p(0);
  v.p_multi = p(1);
  v.label = p(0) >= p(1) ? PatchLabel::Single : PatchLabel::Multi;
  v.confidence = std::max(p(0), p(1));
  return v;
}

class TrainedFilter final : public PatchClassifier {
 public:
  TrainedFilter(std::shared_ptr<const EmbeddingBackbone> backbone, FilterHead head)
      : backbone_(std::move(backbone)), head_(std::move(head)) {
    if (head_.initialized() && head_.backbone_fingerprint != backbone_->fingerprint()) {
      throw ConfigError("filter head was trained on a different backbone");
    }
  }
  Verdict classify(const Image& patch) const override { return excount::classify(patch, *backbone_, head_); }
  const FilterHead& head() const { return head_; }

 private:
  std::shared_ptr<const EmbeddingBackbone> backbone_;
  FilterHead head_;
};

// ---------------------------------------------------------------------------
// Training-set curation

enum class SplitTag { Train, Eval };

struct LabeledPatch {
  Image patch;
  PatchLabel label = PatchLabel::Single;
  SplitTag split = SplitTag::Train;
  std::string image_id;
  std::string class_name;
};

struct LabeledPatchSet {
  std::vector<LabeledPatch> patches;
  std::size_t skipped_records = 0;
  bool class_disjoint = false;

  std::size_t count(SplitTag s) const {
    return static_cast<std::size_t>(std::count_if(patches.begin(), patches.end(),
                                                  [&](const LabeledPatch& p) { return p.split == s; }));
  }
  std::size_t count(PatchLabel l) const {
    return static_cast<std::size_t>(std::count_if(patches.begin(), patches.end(),
                                                  [&](const LabeledPatch& p) { return p.label == l; }));
  }
};

struct CurationConfig {
  int multi_crops = 2;          // random multi-object crops per image
  int background_crops = 0;     // random crops touching no object (needs the scene)
  double crop_min = 0.2;        // crop side range, as a fraction of the image side
  double crop_max = 0.8;
  int patch_size = 32;          // stored patch resolution
  double train_fraction = 0.7;
};

// Assigns the 7:3 split: whole classes when that lands within one patch of the
// target, otherwise a seeded patch-level shuffle.
inline void assign_patch_split(LabeledPatchSet& set, double train_fraction, std::uint64_t seed) {
  const std::size_t n = set.patches.size();
  const auto target = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(n)));
  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) by_class[set.patches[i].class_name].push_back(i);
  std::vector<std::string> classes;
  for (const auto& [c, _] : by_class) classes.push_back(c);
  std::mt19937_64 rng(mix_seed(seed, 0x7a3));
  std::shuffle(classes.begin(), classes.end(), rng);

  if (classes.size() >= 2) {
    std::vector<bool> in_train(classes.size(), false);
    std::size_t total = 0;
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const std::size_t sz = by_class[classes[c]].size();
      if (total + sz <= target + 1) {
        in_train[c] = true;
        total += sz;
      }
    }
    const bool balanced = total + 1 >= target && total <= target + 1 && total < n && total > 0;
    if (balanced) {
      for (std::size_t c = 0; c < classes.size(); ++c)
        for (std::size_t i : by_class[classes[c]]) set.patches[i].split = in_train[c] ? SplitTag::Train : SplitTag::Eval;
      set.class_disjoint = true;
      return;
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t r = 0; r < n; ++r) set.patches[order[r]].split = r < target ? SplitTag::Train : SplitTag::Eval;
  set.class_disjoint = false;
}

// Singles are the annotated exemplar crops; multis are the whole image plus random
// crops covering at least two dots, plus optional crops touching no scene object.
inline LabeledPatchSet build_training_set(const Dataset& data, std::uint64_t seed, const CurationConfig& cfg = {},
                                          const std::vector<std::size_t>* subset = nullptr) {
  LabeledPatchSet set;
  std::vector<std::size_t> idx;
  if (subset) idx = *subset;
  else {
    idx.resize(data.size());
    std::iota(idx.begin(), idx.end(), 0);
  }
  for (std::size_t i : idx) {
    const CountingRecord& r = data.records[i];
    const Image& img = data.images[i];
    if (r.exemplar_boxes.empty() || r.points.size() < 2) {
      ++set.skipped_records;
      continue;
    }
    for (const Box& b : r.exemplar_boxes) {
      set.patches.push_back({crop_resize(img, b, cfg.patch_size, cfg.patch_size), PatchLabel::Single, SplitTag::Train,
                             r.image_id, r.class_name});
    }
    set.patches.push_back({resize(img, cfg.patch_size, cfg.patch_size), PatchLabel::Multi, SplitTag::Train, r.image_id,
                           r.class_name});
    std::mt19937_64 rng(mix_seed(seed, hash_string(r.image_id)));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto random_box = [&] {
      const double w = (cfg.crop_min + (cfg.crop_max - cfg.crop_min) * u01(rng)) * r.width;
      const double h = (cfg.crop_min + (cfg.crop_max - cfg.crop_min) * u01(rng)) * r.height;
      const double x = u01(rng) * (r.width - w);
      const double y = u01(rng) * (r.height - h);
      return Box{x, y, x + w, y + h};
    };
    for (int c = 0; c < cfg.multi_crops; ++c) {
      for (int attempt = 0; attempt < 200; ++attempt) {
        const Box box = random_box();
        const auto covered = std::count_if(r.points.begin(), r.points.end(),
                                           [&](const Point& p) { return box.contains(p.x, p.y); });
        if (covered >= 2) {
          set.patches.push_back({crop_resize(img, box, cfg.patch_size, cfg.patch_size), PatchLabel::Multi,
                                 SplitTag::Train, r.image_id, r.class_name});
          break;
        }
      }
    }
    const auto found = data.scenes.find(r.image_id);
    if (found == data.scenes.end()) continue;
    for (int c = 0; c < cfg.background_crops; ++c) {
      for (int attempt = 0; attempt < 200; ++attempt) {
        const Box box = random_box();
        const bool empty = std::none_of(found->second.objects.begin(), found->second.objects.end(), [&](const SceneObject& o) {
          const Box overlap = intersection(box, o.box());
          return overlap.width() > 0 && overlap.height() > 0;
        });
        if (empty) {
          set.patches.push_back({crop_resize(img, box, cfg.patch_size, cfg.patch_size), PatchLabel::Multi,
                                 SplitTag::Train, r.image_id, r.class_name});
          break;
        }
      }
    }
  }
  assign_patch_split(set, cfg.train_fraction, seed);
  return set;
}

// ---------------------------------------------------------------------------
// Head training

struct FilterTrainConfig {
  int epochs = 100;
  double lr = 1e-4;
  int batch_size = 8;
  std::uint64_t seed = 0;
  int hidden = 0;  // 0: embed_dim / 2
};

struct FilterTrainResult {
  FilterHead head;
  double train_accuracy = 0;
  double eval_accuracy = 0;
  std::vector<double> epoch_loss;
};

inline double accuracy(const FilterHead& head, const std::vector<Eigen::VectorXd>& x, const std::vector<int>& y) {
  if (x.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Eigen::Vector2d p = head.probabilities(x[i]);
    const int pred = p(0) >= p(1) ? 0 : 1;
    ok += pred == y[i] ? 1 : 0;
  }
  return static_cast<double>(ok) / static_cast<double>(x.size());
}

// Minimizes 2-class cross-entropy over frozen embeddings with Adam.
inline FilterTrainResult train_filter(const LabeledPatchSet& data, const EmbeddingBackbone& backbone,
                                      const FilterTrainConfig& cfg = {}) {
  std::vector<Eigen::VectorXd> xtr, xev;
  std::vector<int> ytr, yev;
  for (const auto& p : data.patches) {
    auto& xs = p.split == SplitTag::Train ? xtr : xev;
    auto& ys = p.split == SplitTag::Train ? ytr : yev;
    xs.push_back(backbone.embed(p.patch));
    ys.push_back(static_cast<int>(p.label));
  }
  const bool has_single = std::count(ytr.begin(), ytr.end(), 0) > 0;
  const bool has_multi = std::count(ytr.begin(), ytr.end(), 1) > 0;
  if (!has_single || !has_multi) throw ConfigError("filter training split needs both single and multi patches");

  const int d = backbone.embed_dim();
  const int hdim = cfg.hidden > 0 ? cfg.hidden : std::max(1, d / 2);
  FilterTrainResult res;
  FilterHead& head = res.head;
  head.backbone_fingerprint = backbone.fingerprint();
  head.mean = Eigen::VectorXd::Zero(d);
  for (const auto& x : xtr) head.mean += x;
  head.mean /= static_cast<double>(xtr.size());
  head.stddev = Eigen::VectorXd::Zero(d);
  for (const auto& x : xtr) head.stddev += (x - head.mean).cwiseAbs2();
  head.stddev = (head.stddev / static_cast<double>(xtr.size())).cwiseSqrt().cwiseMax(1e-6);

  std::mt19937_64 rng(mix_seed(cfg.seed, 0xf117));
  head.w1 = nn::random_normal(hdim, d, std::sqrt(2.0 / d), rng);
  head.b1 = Eigen::VectorXd::Zero(hdim);
  head.w2 = nn::random_normal(2, hdim, std::sqrt(1.0 / hdim), rng);
  head.b2 = Eigen::VectorXd::Zero(2);

  std::vector<nn::Param> params(4);
  params[0].value = head.w1;
  params[1].value = head.b1;
  params[2].value = head.w2;
  params[3].value = head.b2;
  for (auto& p : params) p.zero_grad();
  nn::AdamW opt({cfg.lr, 0.9, 0.999, 1e-8, 0.0});

  std::vector<Eigen::VectorXd> xs(xtr.size());
  for (std::size_t i = 0; i < xtr.size(); ++i) xs[i] = (xtr[i] - head.mean).cwiseQuotient(head.stddev);
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = static_cast<std::size_t>(std::max(1, cfg.batch_size));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      for (auto& p : params) p.zero_grad();
      const std::size_t end = std::min(order.size(), start + bs);
      for (std::size_t b = start; b < end; ++b) {
        const Eigen::VectorXd& x = xs[order[b]];
        const int y = ytr[order[b]];
        const Eigen::VectorXd pre = params[0].value * x + params[1].value.col(0);
        const Eigen::VectorXd h = pre.cwiseMax(0.0);
        Eigen::Vector2d z = params[2].value * h + params[3].value.col(0);
        const double mx = z.maxCoeff();
        Eigen::Vector2d prob = (z.array() - mx).exp();
        prob /= prob.sum();
        total += -std::log(std::max(prob(y), 1e-300));
        Eigen::Vector2d dz = prob;
        dz(y) -= 1.0;
        params[2].grad += dz * h.transpose();
        params[3].grad.col(0) += dz;
        Eigen::VectorXd dh = params[2].value.transpose() * dz;
        for (Eigen::Index k = 0; k < dh.size(); ++k)
          if (pre(k) <= 0) dh(k) = 0;
        params[0].grad += dh * x.transpose();
        params[1].grad.col(0) += dh;
      }
      opt.step(params, static_cast<double>(end - start));
    }
    res.epoch_loss.push_back(total / static_cast<double>(xs.size()));
  }
  head.w1 = params[0].value;
  head.b1 = params[1].value.col(0);
  head.w2 = params[2].value;
  head.b2 = params[3].value.col(0);
  res.train_accuracy = accuracy(head, xtr, ytr);
  res.eval_accuracy = accuracy(head, xev, yev);
  return res;
}

// ---------------------------------------------------------------------------
// Head file: "XFLT" | u32 version | u64 backbone fingerprint | u32 dim | u32 hidden
//            | f32 payload: mean[dim] std[dim] w1[hidden*dim] b1[hidden] w2[2*hidden] b2[2]
// Little-endian; matrices row-major.

inline constexpr std::uint32_t kFilterHeadVersion = 1;

inline std::string write_filter_head(const FilterHead& h) {
  if (!h.initialized()) throw UsageError("cannot serialize an untrained filter head");
  std::string out = "XFLT";
  detail::put_u32(out, kFilterHeadVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(h.backbone_fingerprint & 0xffffffffu));
  detail::put_u32(out, static_cast<std::uint32_t>(h.backbone_fingerprint >> 32));
  detail::put_u32(out, static_cast<std::uint32_t>(h.dim()));
  detail::put_u32(out, static_cast<std::uint32_t>(h.hidden()));
  auto put_vec = [&](const Eigen::VectorXd& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) detail::put_f32(out, static_cast<float>(v(i)));
  };
  auto put_mat = [&](const Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) detail::put_f32(out, static_cast<float>(m(r, c)));
  };
  put_vec(h.mean);
  put_vec(h.stddev);
  put_mat(h.w1);
  put_vec(h.b1);
  put_mat(h.w2);
  put_vec(h.b2);
  return out;
}

inline FilterHead read_filter_head(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "XFLT") != 0) throw FormatError("filter head: bad magic at offset 0");
  if (bytes.size() < 24) throw FormatError("filter head: truncated header at offset " + std::to_string(bytes.size()));
  const std::uint32_t version = detail::get_u32(bytes, 4);
  if (version != kFilterHeadVersion) throw FormatError("filter head: unsupported version at offset 4");
  FilterHead h;
  h.backbone_fingerprint = detail::get_u32(bytes, 8) | (std::uint64_t(detail::get_u32(bytes, 12)) << 32);
  const std::uint32_t d = detail::get_u32(bytes, 16);
  const std::uint32_t hid = detail::get_u32(bytes, 20);
  const std::size_t floats = 2ull * d + std::size_t(hid) * d + hid + 2ull * hid + 2;
  if (bytes.size() != 24 + 4 * floats) {
    throw FormatError("filter head: payload length " + std::to_string(bytes.size()) + " != expected " +
                      std::to_string(24 + 4 * floats) + " (offset 24)");
  }
  std::size_t off = 24;
  auto get = [&] {
    const float f = detail::get_f32(bytes, off);
    off += 4;
    return static_cast<double>(f);
  };
  auto get_vec = [&](Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = get();
    return v;
  };
  auto get_mat = [&](Eigen::Index r, Eigen::Index c) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = get();
    return m;
  };
  h.mean = get_vec(d);
  h.stddev = get_vec(d);
  h.w1 = get_mat(hid, d);
  h.b1 = get_vec(hid);
  h.w2 = get_mat(2, hid);
  h.b2 = get_vec(2);
  return h;
}

}  // namespace excount
