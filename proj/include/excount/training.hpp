#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "excount/counter.hpp"
#include "excount/dataset.hpp"
#include "excount/density.hpp"
#include "excount/detector.hpp"
#include "excount/error.hpp"
#include "excount/exemplars.hpp"
#include "excount/filter.hpp"
#include "excount/losses.hpp"
#include "excount/nn.hpp"
#include "excount/parallel.hpp"

namespace excount {

enum class LossMode { DensityOnly, DensityContrastive };

inline const char* loss_mode_name(LossMode m) { return m == LossMode::DensityOnly ? "ld" : "ld+lc"; }

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "ld") return LossMode::DensityOnly;
  if (s == "ld+lc") return LossMode::DensityContrastive;
  throw ConfigError("loss mode must be 'ld' or 'ld+lc', got '" + s + "'");
}

struct TrainConfig {
  double lr = 1e-5;
  int batch_size = 8;
  int epochs = 20;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double sigma = 4.0;
  LossMode loss = LossMode::DensityContrastive;
  bool hflip = false;  // random horizontal flips of image, target and exemplars
  bool cosine = false;  // cosine decay of lr to zero over all steps
  bool keep_best_val = false;  // return the weights of the epoch with the lowest val MAE
  int contrastive_warmup = 0;   // leading epochs trained on L_D only in ld+lc mode
  double finetune_lr = 0;       // lr after the warmup epochs, in both loss modes; 0 keeps lr
  PipelineConfig pipeline;
  CounterConfig counter;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"weight_decay", c.weight_decay},
                     {"sigma", c.sigma},
                     {"loss", loss_mode_name(c.loss)},
                     {"hflip", c.hflip},
                     {"cosine", c.cosine},
                     {"keep_best_val", c.keep_best_val},
                     {"contrastive_warmup", c.contrastive_warmup},
                     {"finetune_lr", c.finetune_lr},
                     {"tau_l", c.pipeline.tau_l},
                     {"tau_iou", c.pipeline.tau_iou},
                     {"k", c.pipeline.k},
                     {"negative_prompt", c.pipeline.negative_prompt},
                     {"fallback", c.pipeline.fallback == FallbackPolicy::Strict ? "strict" : "ladder"},
                     {"use_filter", c.pipeline.use_filter},
                     {"counter", c.counter}};
}

// Missing keys keep their defaults, so a config file may be partial.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.sigma = j.value("sigma", c.sigma);
  if (j.contains("loss")) c.loss = parse_loss_mode(j.at("loss").get<std::string>());
  c.hflip = j.value("hflip", c.hflip);
  c.cosine = j.value("cosine", c.cosine);
  c.keep_best_val = j.value("keep_best_val", c.keep_best_val);
  c.contrastive_warmup = j.value("contrastive_warmup", c.contrastive_warmup);
  c.finetune_lr = j.value("finetune_lr", c.finetune_lr);
  c.pipeline.tau_l = j.value("tau_l", c.pipeline.tau_l);
  c.pipeline.tau_iou = j.value("tau_iou", c.pipeline.tau_iou);
  c.pipeline.k = j.value("k", c.pipeline.k);
  c.pipeline.negative_prompt = j.value("negative_prompt", c.pipeline.negative_prompt);
  if (j.contains("fallback")) {
    const auto f = j.at("fallback").get<std::string>();
    if (f != "strict" && f != "ladder") throw ConfigError("fallback must be 'strict' or 'ladder'");
    c.pipeline.fallback = f == "strict" ? FallbackPolicy::Strict : FallbackPolicy::Ladder;
  }
  c.pipeline.use_filter = j.value("use_filter", c.pipeline.use_filter);
  if (j.contains("counter")) {
    CounterConfig cc = c.counter;
    nlohmann::json merged = cc;
    merged.update(j.at("counter"));
    c.counter = merged.get<CounterConfig>();
  }
}

inline void validate(const TrainConfig& c) {
  if (!(c.lr >= 0) || !std::isfinite(c.lr)) throw ConfigError("lr must be a finite value >= 0");
  if (c.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (c.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (c.contrastive_warmup < 0) throw ConfigError("contrastive_warmup must be >= 0");
  if (!(c.finetune_lr >= 0)) throw ConfigError("finetune_lr must be >= 0");
  if (!(c.beta1 >= 0 && c.beta1 < 1 && c.beta2 >= 0 && c.beta2 < 1)) throw ConfigError("betas must lie in [0,1)");
  if (!(c.eps > 0)) throw ConfigError("eps must be positive");
  if (!(c.weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  if (!(c.sigma > 0)) throw ConfigError("sigma must be positive");
  validate(c.pipeline);
  validate(c.counter);
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// FNV-1a over the canonical (key-sorted) JSON form.
inline std::string config_hash(const TrainConfig& c) { return hash_hex(hash_string(nlohmann::json(c).dump())); }

// ---------------------------------------------------------------------------
// Metrics

struct ImageResult {
  std::string image_id;
  double gt_count = 0;
  double pred_count = 0;
};

struct EvalReport {
  std::string split;
  std::string config_hash;
  std::vector<ImageResult> images;
  double mae = 0;
  double rmse = 0;
};

inline EvalReport make_report(std::vector<ImageResult> images, std::string split = {}, std::string hash = {}) {
  if (images.empty()) throw ConfigError("cannot evaluate an empty split" + (split.empty() ? "" : " '" + split + "'"));
  EvalReport r;
  r.split = std::move(split);
  r.config_hash = std::move(hash);
  r.images = std::move(images);
  double abs_sum = 0, sq_sum = 0;
  for (const auto& im : r.images) {
    const double e = im.gt_count - im.pred_count;
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  const double n = static_cast<double>(r.images.size());
  r.mae = abs_sum / n;
  r.rmse = std::sqrt(sq_sum / n);
  return r;
}

inline nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& im : r.images) per.push_back({{"image", im.image_id}, {"gt", im.gt_count}, {"pred", im.pred_count}});
  return {{"split", r.split}, {"config_hash", r.config_hash}, {"mae", r.mae}, {"rmse", r.rmse}, {"images", per}};
}

inline std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(10) << "image,gt,pred\n";
  for (const auto& im : r.images) os << im.image_id << ',' << im.gt_count << ',' << im.pred_count << '\n';
  return os.str();
}

using ExemplarMap = std::map<std::string, ExemplarPair>;

inline const ExemplarPair& pair_for(const ExemplarMap& pairs, const std::string& image_id) {
  const auto it = pairs.find(image_id);
  if (it == pairs.end()) throw UsageError("no exemplar pair cached for image " + image_id);
  return it->second;
}

// Counts with the positive exemplar stream only.
inline EvalReport evaluate_counter(const Counter& counter, const Dataset& ds, const std::vector<std::size_t>& indices,
                                   const ExemplarMap& pairs, const std::string& split = {}, const std::string& hash = {},
                                   unsigned threads = 0) {
  if (indices.empty()) throw ConfigError("cannot evaluate an empty split" + (split.empty() ? "" : " '" + split + "'"));
  std::vector<ImageResult> res(indices.size());
  parallel_for(
      indices.size(),
      [&](std::size_t j) {
        const CountingRecord& r = ds.records[indices[j]];
        const DensityMap d = counter.forward(ds.images[indices[j]], pair_for(pairs, r.image_id).positive_patches());
        res[j] = {r.image_id, static_cast<double>(r.points.size()), count_from_density(d)};
      },
      threads);
  return make_report(std::move(res), split, hash);
}

// Detector-only baseline: the count is the number of tau_l-thresholded boxes for
// the class prompt, optionally after single-object filtering.
inline EvalReport evaluate_detect_count(const Dataset& ds, const std::vector<std::size_t>& indices,
                                        const Detector& detector, const PatchClassifier* classifier,
                                        const PipelineConfig& cfg, const std::string& split = {}) {
  if (indices.empty()) throw ConfigError("cannot evaluate an empty split" + (split.empty() ? "" : " '" + split + "'"));
  std::vector<ImageResult> res(indices.size());
  parallel_for(indices.size(), [&](std::size_t j) {
    const std::size_t i = indices[j];
    const CountingRecord& r = ds.records[i];
    DetectionRequest req;
    req.image_ref = detection_ref(ds, i);
    req.image = &ds.images[i];
    req.width = ds.images[i].width;
    req.height = ds.images[i].height;
    req.prompt = r.class_name;
    req.logit_threshold = cfg.tau_l;
    const auto boxes = detector.detect(req).boxes;
    const std::size_t n = classifier ? filter_single_object(boxes, ds.images[i], *classifier).kept.size() : boxes.size();
    res[j] = {r.image_id, static_cast<double>(r.points.size()), static_cast<double>(n)};
  });
  return make_report(std::move(res), split);
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  int epoch = 0;
  LossReport loss;  // mean over the epoch's images
  int contrastive_images = 0;
  std::optional<double> val_mae;
  std::optional<double> val_rmse;
};

inline nlohmann::json epoch_json(const EpochLog& e, const std::string& hash) {
  nlohmann::json j{{"epoch", e.epoch},
                   {"l_c", e.loss.l_c},
                   {"l_d", e.loss.l_d},
                   {"l_total", e.loss.l_total},
                   {"sim_pos", e.loss.sim_pos},
                   {"sim_neg", e.loss.sim_neg},
                   {"contrastive_images", e.contrastive_images},
                   {"config_hash", hash}};
  if (e.val_mae) j["val_mae"] = *e.val_mae;
  if (e.val_rmse) j["val_rmse"] = *e.val_rmse;
  return j;
}

struct TrainResult {
  Counter counter;
  std::vector<EpochLog> history;
  std::string config_hash;
  int selected_epoch = 0;  // epoch whose weights `counter` holds
};

inline Image hflip_image(const Image& img) {
  Image out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(img.width - 1 - x, y, c);
  return out;
}

inline DensityMap hflip_density(const DensityMap& d) {
  DensityMap out = d;
  for (int y = 0; y < d.height; ++y)
    for (int x = 0; x < d.width; ++x) out.at(y, x) = d.at(y, d.width - 1 - x);
  return out;
}

inline nlohmann::json checkpoint_metadata(const TrainConfig& cfg, const TrainResult& r) {
  nlohmann::json j{{"config_hash", r.config_hash},
                   {"train_config", cfg},
                   {"epochs_run", r.history.size()},
                   {"selected_epoch", r.selected_epoch}};
  if (!r.history.empty()) j["final_epoch"] = epoch_json(r.history.back(), r.config_hash);
  return j;
}

// Fine-tunes a fresh counter on `train` with cached exemplar pairs. Each image
// contributes L_D on its positive stream plus, in ld+lc mode and when it has
// negatives, L_C against its negative stream. One AdamW step per batch.
inline TrainResult train_counter(const Dataset& ds, const std::vector<std::size_t>& train,
                                 const std::vector<std::size_t>& val, const ExemplarMap& pairs, const TrainConfig& cfg,
                                 std::ostream* log = nullptr) {
  validate(cfg);
  if (train.empty()) throw ConfigError("training split is empty");
  CounterConfig cc = cfg.counter;
  cc.seed = mix_seed(cfg.seed, 0xc0u);
  cc.exemplar_size = cfg.pipeline.exemplar_size;
  TrainResult result{Counter(cc), {}, config_hash(cfg)};
  Counter& counter = result.counter;

  std::vector<DensityMap> targets;
  std::vector<std::vector<Image>> pos, neg;
  for (std::size_t i : train) {
    const CountingRecord& r = ds.records[i];
    targets.push_back(ground_truth_density(r, cfg.sigma, cc.density_scale));
    const ExemplarPair& p = pair_for(pairs, r.image_id);
    pos.push_back(p.positive_patches());
    neg.push_back(p.negative_patches());
  }

  nn::AdamW opt({cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay});
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x7a11u));
  std::vector<std::size_t> order(train.size());
  const std::size_t batches = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = static_cast<long>(std::max<std::size_t>(1, batches * static_cast<std::size_t>(cfg.epochs)));
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<Mat> best_params;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<LossReport> reports;
    EpochLog log_entry;
    log_entry.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (cfg.finetune_lr > 0 && epoch > cfg.contrastive_warmup) {
        opt.set_lr(cfg.finetune_lr);
      } else if (cfg.cosine) {
        const double progress = static_cast<double>(opt.steps()) / static_cast<double>(total_steps);
        opt.set_lr(0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * progress)));
      }
      counter.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t t = order[b];
        const bool use_neg =
            cfg.loss == LossMode::DensityContrastive && epoch > cfg.contrastive_warmup && !neg[t].empty();
        const bool flip = cfg.hflip && (rng() & 1u);
        LossReport r;
        if (flip) {
          std::vector<Image> fp, fn;
          for (const auto& p : pos[t]) fp.push_back(hflip_image(p));
          for (const auto& p : neg[t]) fn.push_back(hflip_image(p));
          r = counter.accumulate(hflip_image(ds.images[train[t]]), hflip_density(targets[t]), fp, use_neg ? &fn : nullptr);
        } else {
          r = counter.accumulate(ds.images[train[t]], targets[t], pos[t], use_neg ? &neg[t] : nullptr);
        }
        if (!std::isfinite(r.l_total)) {
          std::ostringstream os;
          os << "non-finite loss at epoch " << epoch << " on image " << ds.records[train[t]].image_id
             << " (l_d=" << r.l_d << ", l_c=" << r.l_c << ", sim_pos=" << r.sim_pos << ", sim_neg=" << r.sim_neg << ")";
          throw NumericError(os.str());
        }
        log_entry.contrastive_images += r.contrastive_active ? 1 : 0;
        reports.push_back(r);
      }
      opt.step(counter.params(), static_cast<double>(end - start));
    }
    log_entry.loss = mean_report(reports);
    if (!val.empty()) {
      const EvalReport v = evaluate_counter(counter, ds, val, pairs, "val", result.config_hash);
      log_entry.val_mae = v.mae;
      log_entry.val_rmse = v.rmse;
    }
    if (log) *log << epoch_json(log_entry, result.config_hash).dump() << '\n' << std::flush;
    result.history.push_back(log_entry);
    if (!cfg.keep_best_val || !log_entry.val_mae || *log_entry.val_mae < best_val) {
      result.selected_epoch = epoch;
      if (cfg.keep_best_val && log_entry.val_mae) {
        best_val = *log_entry.val_mae;
        best_params.clear();
        for (const auto& p : counter.params()) best_params.push_back(p.value);
      }
    }
  }
  if (!best_params.empty()) {
    for (std::size_t i = 0; i < best_params.size(); ++i) counter.params()[i].value = best_params[i];
  }
  return result;
}

inline ExemplarMap to_exemplar_map(std::vector<ExemplarPair> pairs) {
  ExemplarMap m;
  for (auto& p : pairs) {
    std::string id = p.image_id;
    m.emplace(std::move(id), std::move(p));
  }
  return m;
}

// Runs the exemplar pipeline over every listed image.
inline ExemplarMap prepare_exemplars(const Dataset& ds, const std::vector<std::size_t>& indices, const Detector& detector,
                                     const PatchClassifier* classifier, const PipelineConfig& cfg) {
  return to_exemplar_map(build_dataset_exemplars(ds, indices, detector, classifier, cfg));
}

// ---------------------------------------------------------------------------
// Threshold sweeps

enum class SweepParam { TauIou, TauL };

inline const char* sweep_param_name(SweepParam p) { return p == SweepParam::TauIou ? "tau_iou" : "tau_l"; }

inline SweepParam parse_sweep_param(const std::string& s) {
  if (s == "tau_iou") return SweepParam::TauIou;
  if (s == "tau_l") return SweepParam::TauL;
  throw ConfigError("sweep parameter must be 'tau_iou' or 'tau_l', got '" + s + "'");
}

inline std::vector<double> default_sweep_values(SweepParam p) {
  if (p == SweepParam::TauIou) return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  return {0.01, 0.02, 0.03, 0.04, 0.05};
}

struct SweepRow {
  double value = 0;
  EvalReport val, test;
  double avg_mae() const { return (val.mae + test.mae) / 2; }
  double avg_rmse() const { return (val.rmse + test.rmse) / 2; }
  std::string config_hash;
};

struct SweepTable {
  SweepParam param = SweepParam::TauIou;
  std::vector<SweepRow> rows;
  std::size_t best = 0;  // lowest avg MAE, ties broken by avg RMSE then order
};

struct Experiment {
  EvalReport val, test;
  TrainResult trained;
};

// Exemplars, training and evaluation for one configuration.
inline Experiment run_experiment(const Dataset& ds, const Detector& detector, const PatchClassifier* classifier,
                                 const TrainConfig& cfg, std::ostream* log = nullptr) {
  const auto train = ds.indices(SplitPart::Train);
  const auto val = ds.indices(SplitPart::Val);
  const auto test = ds.indices(SplitPart::Test);
  std::vector<std::size_t> all = train;
  all.insert(all.end(), val.begin(), val.end());
  all.insert(all.end(), test.begin(), test.end());
  const ExemplarMap pairs = prepare_exemplars(ds, all, detector, classifier, cfg.pipeline);
  TrainResult tr = train_counter(ds, train, val, pairs, cfg, log);
  EvalReport v = evaluate_counter(tr.counter, ds, val, pairs, "val", tr.config_hash);
  EvalReport t = evaluate_counter(tr.counter, ds, test, pairs, "test", tr.config_hash);
  return {std::move(v), std::move(t), std::move(tr)};
}

inline SweepTable sweep(const Dataset& ds, const Detector& detector, const PatchClassifier* classifier,
                        const TrainConfig& base, SweepParam param, const std::vector<double>& values,
                        std::ostream* log = nullptr) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  SweepTable table;
  table.param = param;
  for (double v : values) {
    TrainConfig cfg = base;
    (param == SweepParam::TauIou ? cfg.pipeline.tau_iou : cfg.pipeline.tau_l) = v;
    Experiment e = run_experiment(ds, detector, classifier, cfg);
    SweepRow row{v, std::move(e.val), std::move(e.test), e.trained.config_hash};
    if (log) {
      *log << nlohmann::json{{"sweep", sweep_param_name(param)},   {"value", v},
                             {"val_mae", row.val.mae},             {"test_mae", row.test.mae},
                             {"config_hash", row.config_hash}}
                  .dump()
           << '\n'
           << std::flush;
    }
    table.rows.push_back(std::move(row));
  }
  for (std::size_t i = 1; i < table.rows.size(); ++i) {
    const auto& a = table.rows[i];
    const auto& b = table.rows[table.best];
    if (a.avg_mae() < b.avg_mae() || (a.avg_mae() == b.avg_mae() && a.avg_rmse() < b.avg_rmse())) table.best = i;
  }
  return table;
}

inline std::string sweep_csv(const SweepTable& t) {
  std::ostringstream os;
  os << std::setprecision(10) << sweep_param_name(t.param)
     << ",val_mae,val_rmse,test_mae,test_rmse,avg_mae,avg_rmse,best,config_hash\n";
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    os << r.value << ',' << r.val.mae << ',' << r.val.rmse << ',' << r.test.mae << ',' << r.test.rmse << ','
       << r.avg_mae() << ',' << r.avg_rmse() << ',' << (i == t.best ? 1 : 0) << ',' << r.config_hash << '\n';
  }
  return os.str();
}

// Fixed-width table; the best row is marked with '*' and bracketed values.
inline std::string sweep_text(const SweepTable& t) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << std::setw(9) << sweep_param_name(t.param) << " | " << std::setw(17) << "Val Set" << " | " << std::setw(17)
     << "Test Set" << " | " << std::setw(17) << "Avg" << '\n';
  os << std::setw(9) << "" << " | " << std::setw(8) << "MAE" << ' ' << std::setw(8) << "RMSE" << " | " << std::setw(8)
     << "MAE" << ' ' << std::setw(8) << "RMSE" << " | " << std::setw(8) << "MAE" << ' ' << std::setw(8) << "RMSE" << '\n';
  os << std::string(9, '-') << "-+-" << std::string(17, '-') << "-+-" << std::string(17, '-') << "-+-"
     << std::string(17, '-') << '\n';
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    const bool best = i == t.best;
    auto cell = [&](double v) {
      std::ostringstream c;
      c << std::fixed << std::setprecision(2) << v;
      return best ? "[" + c.str() + "]" : c.str();
    };
    std::ostringstream val;
    val << std::setprecision(2) << r.value;
    os << std::setw(9) << ((best ? "*" : "") + val.str()) << " | " << std::setw(8) << cell(r.val.mae) << ' '
       << std::setw(8) << cell(r.val.rmse) << " | " << std::setw(8) << cell(r.test.mae) << ' ' << std::setw(8)
       << cell(r.test.rmse) << " | " << std::setw(8) << cell(r.avg_mae()) << ' ' << std::setw(8) << cell(r.avg_rmse())
       << '\n';
  }
  return os.str();
}

}  // namespace excount
