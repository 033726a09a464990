#pragma once

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "excount/dataset.hpp"
#include "excount/detector.hpp"
#include "excount/error.hpp"
#include "excount/filter.hpp"
#include "excount/geometry.hpp"
#include "excount/image.hpp"
#include "excount/parallel.hpp"

namespace excount {

enum class FallbackPolicy { Ladder, Strict };

struct PipelineConfig {
  double tau_l = 0.02;
  double tau_iou = 0.5;
  int k = 3;
  std::string negative_prompt{kGenericPrompt};
  FallbackPolicy fallback = FallbackPolicy::Ladder;
  bool use_filter = true;
  int exemplar_size = 64;
  int background_attempts = 100;
  std::uint64_t seed = 0;
};

inline void validate(const PipelineConfig& c) {
  if (!(c.tau_l >= 0 && c.tau_l < 1)) throw ConfigError("tau_l must lie in [0,1)");
  if (!(c.tau_iou > 0 && c.tau_iou <= 1)) throw ConfigError("tau_iou must lie in (0,1]");
  if (c.k < 1) throw ConfigError("k must be at least 1");
  if (c.negative_prompt.empty()) throw ConfigError("negative prompt must be nonempty");
}

struct Candidates {
  std::vector<ScoredBox> positives;
  std::vector<ScoredBox> negatives_raw;
};

// Detector proposals for "{class_name}" and for the generic prompt, both at tau_l.
inline Candidates propose_candidates(const Detector& detector, const std::string& image_ref, const Image& image,
                                     const std::string& class_name, const PipelineConfig& cfg) {
  if (class_name.empty()) throw UsageError("class name must be nonempty");
  DetectionRequest req;
  req.image_ref = image_ref;
  req.image = &image;
  req.width = image.width;
  req.height = image.height;
  req.logit_threshold = cfg.tau_l;
  req.prompt = class_name;
  Candidates c;
  c.positives = detector.detect(req).boxes;
  req.prompt = cfg.negative_prompt;
  c.negatives_raw = detector.detect(req).boxes;
  return c;
}

struct FilterOutcome {
  std::vector<ScoredBox> kept;
  std::vector<double> confidence;  // classifier confidence of each kept box
  std::size_t skipped_small = 0;
};

inline constexpr int kFilterPatchSize = 32;

// Keeps, in order, the candidates whose crop the classifier labels single.
// Crops under 2x2 pixels are skipped and counted.
inline FilterOutcome filter_single_object(const std::vector<ScoredBox>& candidates, const Image& image,
                                          const PatchClassifier& classifier) {
  FilterOutcome out;
  for (const auto& c : candidates) {
    if (c.box.width() < 2.0 || c.box.height() < 2.0) {
      ++out.skipped_small;
      continue;
    }
    const Verdict v = classifier.classify(crop_resize(image, c.box, kFilterPatchSize, kFilterPatchSize));
    if (v.label == PatchLabel::Single) {
      out.kept.push_back(c);
      out.confidence.push_back(v.confidence);
    }
  }
  return out;
}

// The k best candidates by (logit desc, area desc, input index asc).
inline std::vector<ScoredBox> select_top_k(const std::vector<ScoredBox>& candidates, int k) {
  if (k < 1) throw ConfigError("k must be at least 1");
  std::vector<ScoredBox> out;
  for (std::size_t i : rank_by_logit(candidates)) {
    if (out.size() >= static_cast<std::size_t>(k)) break;
    out.push_back(candidates[i]);
  }
  return out;
}

enum class PositiveFallback { None, RelaxedClassifier, HalvedThreshold };
enum class NegativeFallback { None, Background, ContrastiveDisabled };

inline const char* fallback_name(PositiveFallback f) {
  switch (f) {
    case PositiveFallback::None: return "none";
    case PositiveFallback::RelaxedClassifier: return "relaxed_classifier";
    case PositiveFallback::HalvedThreshold: return "halved_threshold";
  }
  return "?";
}

inline const char* fallback_name(NegativeFallback f) {
  switch (f) {
    case NegativeFallback::None: return "none";
    case NegativeFallback::Background: return "background";
    case NegativeFallback::ContrastiveDisabled: return "contrastive_disabled";
  }
  return "?";
}

struct Exemplar {
  ScoredBox source;
  Image patch;
  double classifier_confidence = -1;  // -1 when the box was not classified
};

struct ExemplarPair {
  std::string image_id;
  std::vector<Exemplar> positives;
  std::vector<Exemplar> negatives;
  PositiveFallback positive_fallback = PositiveFallback::None;
  NegativeFallback negative_fallback = NegativeFallback::None;
  double tau_l_used = 0;
  std::size_t skipped_small = 0;
  std::vector<ScoredBox> positive_candidates;  // thresholded B^p, before filtering

  bool contrastive_enabled() const { return !negatives.empty(); }

  std::vector<Image> positive_patches() const {
    std::vector<Image> v;
    for (const auto& e : positives) v.push_back(e.patch);
    return v;
  }
  std::vector<Image> negative_patches() const {
    std::vector<Image> v;
    for (const auto& e : negatives) v.push_back(e.patch);
    return v;
  }
};

namespace detail {

struct StageResult {
  Candidates cand;
  std::vector<ScoredBox> negatives_dedup;
  FilterOutcome pos, neg;
};

inline StageResult run_stage(const Detector& detector, const std::string& image_ref, const Image& image,
                             const std::string& class_name, const PatchClassifier* classifier,
                             const PipelineConfig& cfg) {
  StageResult s;
  s.cand = propose_candidates(detector, image_ref, image, class_name, cfg);
  s.negatives_dedup = dedup_negatives(s.cand.negatives_raw, s.cand.positives, cfg.tau_iou);
  if (cfg.use_filter && classifier) {
    s.pos = filter_single_object(s.cand.positives, image, *classifier);
    s.neg = filter_single_object(s.negatives_dedup, image, *classifier);
  } else {
    s.pos.kept = s.cand.positives;
    s.pos.confidence.assign(s.pos.kept.size(), -1.0);
    s.neg.kept = s.negatives_dedup;
    s.neg.confidence.assign(s.neg.kept.size(), -1.0);
  }
  return s;
}

inline std::vector<Exemplar> take_top(const FilterOutcome& f, const Image& image, int k, int size) {
  std::vector<Exemplar> out;
  for (std::size_t i : rank_by_logit(f.kept)) {
    if (out.size() >= static_cast<std::size_t>(k)) break;
    out.push_back({f.kept[i], crop_resize(image, f.kept[i].box, size, size), f.confidence[i]});
  }
  return out;
}

}  // namespace detail

// Algorithm: propose -> dedup negatives against thresholded positives -> single-
// object filter on both streams -> top-k on both, with fallbacks for empty streams.
inline ExemplarPair build_exemplar_pairs(const Detector& detector, const std::string& image_id, const std::string& image_ref,
                                         const Image& image, const std::string& class_name,
                                         const PatchClassifier* classifier, const PipelineConfig& cfg) {
  validate(cfg);
  ExemplarPair pair;
  pair.image_id = image_id;
  pair.tau_l_used = cfg.tau_l;
  detail::StageResult s = detail::run_stage(detector, image_ref, image, class_name, classifier, cfg);

  if (s.pos.kept.empty()) {
    if (cfg.fallback == FallbackPolicy::Strict) {
      throw UsageError("no positive exemplar for image " + image_id + " (class '" + class_name + "')");
    }
    if (s.cand.positives.empty()) {
      PipelineConfig relaxed = cfg;
      relaxed.tau_l = cfg.tau_l / 2;
      s = detail::run_stage(detector, image_ref, image, class_name, classifier, relaxed);
      pair.tau_l_used = relaxed.tau_l;
      pair.positive_fallback = PositiveFallback::HalvedThreshold;
    }
    if (s.pos.kept.empty() && !s.cand.positives.empty()) {
      const std::size_t best = rank_by_logit(s.cand.positives).front();
      s.pos.kept = {s.cand.positives[best]};
      s.pos.confidence = {-1.0};
      pair.positive_fallback = PositiveFallback::RelaxedClassifier;
    }
    if (s.pos.kept.empty()) {
      throw UsageError("no positive candidates for image " + image_id + " (class '" + class_name +
                       "') even at tau_l=" + std::to_string(pair.tau_l_used));
    }
  }
  pair.skipped_small = s.pos.skipped_small + s.neg.skipped_small;
  pair.positive_candidates = s.cand.positives;
  pair.positives = detail::take_top(s.pos, image, cfg.k, cfg.exemplar_size);
  pair.negatives = detail::take_top(s.neg, image, cfg.k, cfg.exemplar_size);

  if (pair.negatives.empty()) {
    // Background crops sized like the median positive, clear of every positive candidate.
    std::vector<double> ws, hs;
    for (const auto& p : pair.positives) {
      ws.push_back(p.source.box.width());
      hs.push_back(p.source.box.height());
    }
    std::nth_element(ws.begin(), ws.begin() + ws.size() / 2, ws.end());
    std::nth_element(hs.begin(), hs.begin() + hs.size() / 2, hs.end());
    const double w = std::min<double>(ws[ws.size() / 2], image.width);
    const double h = std::min<double>(hs[hs.size() / 2], image.height);
    std::mt19937_64 rng(mix_seed(cfg.seed, hash_string(image_id)));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int a = 0; a < cfg.background_attempts && pair.negatives.size() < static_cast<std::size_t>(cfg.k); ++a) {
      const double x = u01(rng) * (image.width - w);
      const double y = u01(rng) * (image.height - h);
      const Box b{x, y, x + w, y + h};
      if (!b.valid()) continue;
      const bool clear = std::all_of(s.cand.positives.begin(), s.cand.positives.end(),
                                     [&](const ScoredBox& p) { return iou(b, p.box) < cfg.tau_iou; }) &&
                         std::all_of(pair.positives.begin(), pair.positives.end(),
                                     [&](const Exemplar& p) { return iou(b, p.source.box) < cfg.tau_iou; });
      if (!clear) continue;
      pair.negatives.push_back({{b, 0.0, "background"}, crop_resize(image, b, cfg.exemplar_size, cfg.exemplar_size), -1.0});
    }
    pair.negative_fallback = pair.negatives.empty() ? NegativeFallback::ContrastiveDisabled : NegativeFallback::Background;
  }
  return pair;
}

// ---------------------------------------------------------------------------
// Dataset-level driver and the JSON-lines cache.

// A synthetic detector that knows every scene of the dataset.
inline SyntheticDetector synthetic_detector_for(const Dataset& ds, const NoiseSpec& noise = {}) {
  if (ds.scenes.empty()) throw ConfigError("the synthetic detector needs a dataset with scenes.json");
  SyntheticDetector d(noise);
  for (const auto& [id, scene] : ds.scenes) d.add_scene(id, scene);
  return d;
}

inline std::string detection_ref(const Dataset& ds, std::size_t i) {
  if (ds.scenes.count(ds.records[i].image_id) || ds.root.empty()) return ds.records[i].image_id;
  return (ds.root / ds.records[i].image_path).string();
}

// Runs the pipeline on the given records, in parallel across images; the result
// order matches `indices`.
inline std::vector<ExemplarPair> build_dataset_exemplars(const Dataset& ds, const std::vector<std::size_t>& indices,
                                                         const Detector& detector, const PatchClassifier* classifier,
                                                         const PipelineConfig& cfg, unsigned threads = 0) {
  std::vector<ExemplarPair> out(indices.size());
  parallel_for(
      indices.size(),
      [&](std::size_t j) {
        const std::size_t i = indices[j];
        out[j] = build_exemplar_pairs(detector, ds.records[i].image_id, detection_ref(ds, i), ds.images[i],
                                      ds.records[i].class_name, classifier, cfg);
      },
      threads);
  return out;
}

inline nlohmann::json exemplar_record(const ExemplarPair& p, const std::string& class_name = {}) {
  auto boxes = [](const std::vector<Exemplar>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& e : v) {
      const Box& b = e.source.box;
      nlohmann::json r{{"xyxy", {b.x_min, b.y_min, b.x_max, b.y_max}}, {"logit", e.source.logit}, {"source", e.source.source_prompt}};
      if (e.classifier_confidence >= 0) r["confidence"] = e.classifier_confidence;
      a.push_back(r);
    }
    return a;
  };
  nlohmann::json j{{"image", p.image_id},
                   {"positives", boxes(p.positives)},
                   {"negatives", boxes(p.negatives)},
                   {"positive_fallback", fallback_name(p.positive_fallback)},
                   {"negative_fallback", fallback_name(p.negative_fallback)},
                   {"tau_l", p.tau_l_used}};
  if (!class_name.empty()) j["class"] = class_name;
  return j;
}

// Rebuilds a pair from its cached record by re-cropping the source image.
inline ExemplarPair exemplar_from_record(const nlohmann::json& j, const Image& image, int exemplar_size) {
  ExemplarPair p;
  p.image_id = j.at("image").get<std::string>();
  p.tau_l_used = j.value("tau_l", 0.0);
  auto load = [&](const nlohmann::json& arr, std::vector<Exemplar>& dst) {
    for (const auto& r : arr) {
      const auto& xy = r.at("xyxy");
      const Box b{xy.at(0).get<double>(), xy.at(1).get<double>(), xy.at(2).get<double>(), xy.at(3).get<double>()};
      require_valid(b);
      dst.push_back({{b, r.at("logit").get<double>(), r.value("source", std::string{})},
                     crop_resize(image, b, exemplar_size, exemplar_size), r.value("confidence", -1.0)});
    }
  };
  load(j.at("positives"), p.positives);
  load(j.at("negatives"), p.negatives);
  const std::string pf = j.value("positive_fallback", "none");
  p.positive_fallback = pf == "relaxed_classifier" ? PositiveFallback::RelaxedClassifier
                        : pf == "halved_threshold" ? PositiveFallback::HalvedThreshold
                                                   : PositiveFallback::None;
  const std::string nf = j.value("negative_fallback", "none");
  p.negative_fallback = nf == "background"             ? NegativeFallback::Background
                        : nf == "contrastive_disabled" ? NegativeFallback::ContrastiveDisabled
                                                       : NegativeFallback::None;
  return p;
}

inline void write_exemplar_cache(const std::filesystem::path& dir, const Dataset& ds, const std::vector<std::size_t>& indices,
                                 const std::vector<ExemplarPair>& pairs, bool write_patches = true) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::string lines;
  for (std::size_t j = 0; j < pairs.size(); ++j) {
    const auto& p = pairs[j];
    lines += exemplar_record(p, ds.records[indices[j]].class_name).dump() + "\n";
    if (!write_patches) continue;
    fs::create_directories(dir / "patches");
    for (std::size_t e = 0; e < p.positives.size(); ++e)
      write_ppm(dir / "patches" / (p.image_id + "_pos" + std::to_string(e) + ".ppm"), p.positives[e].patch);
    for (std::size_t e = 0; e < p.negatives.size(); ++e)
      write_ppm(dir / "patches" / (p.image_id + "_neg" + std::to_string(e) + ".ppm"), p.negatives[e].patch);
  }
  write_file_bytes(dir / "exemplars.jsonl", lines);
}

// Maps image id -> pair for every cached record whose image is in the dataset.
inline std::map<std::string, ExemplarPair> read_exemplar_cache(const std::filesystem::path& dir, const Dataset& ds,
                                                               int exemplar_size) {
  std::map<std::string, ExemplarPair> out;
  std::istringstream in(read_file_bytes(dir / "exemplars.jsonl"));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("exemplars.jsonl:" + std::to_string(lineno) + ": " + e.what());
    }
    const auto idx = ds.index_of(j.at("image").get<std::string>());
    if (!idx) continue;
    ExemplarPair p = exemplar_from_record(j, ds.images[*idx], exemplar_size);
    out[p.image_id] = std::move(p);
  }
  return out;
}

}  // namespace excount
