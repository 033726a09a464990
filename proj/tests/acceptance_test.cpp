// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero
// if any criterion fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "excount/excount.hpp"
#include "support.hpp"

using namespace excount;
using excount::testing::central_diff;
using excount::testing::rel_error;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Desk model for the end-to-end criteria.
TrainConfig desk_config(std::uint64_t seed) {
  TrainConfig c;
  c.lr = 1e-3;
  c.batch_size = 1;
  c.epochs = 20;
  c.seed = seed;
  c.loss = LossMode::DensityOnly;
  c.hflip = true;
  c.pipeline.use_filter = false;
  c.counter.density_scale = 100;
  c.counter.encoder_channels = {16, 32, 32};
  c.counter.embed_dim = 64;
  c.counter.mlp_hidden = 128;
  c.counter.decoder_channels = {64, 32, 32, 16};
  return c;
}

Dataset desk_dataset(std::uint64_t seed, double distractor_rate = 0.0) {
  SyntheticSpec spec;
  spec.split_images = std::array<int, 3>{30, 10, 10};
  spec.distractor_rate = distractor_rate;
  return synthesize_dataset(spec, seed);
}

double mean_baseline_mae(const Dataset& ds) {
  const auto train = ds.indices(SplitPart::Train);
  double mean = 0;
  for (std::size_t i : train) mean += static_cast<double>(ds.records[i].count());
  mean /= static_cast<double>(train.size());
  std::vector<ImageResult> res;
  for (std::size_t i : ds.indices(SplitPart::Test)) {
    res.push_back({ds.records[i].image_id, static_cast<double>(ds.records[i].count()), mean});
  }
  return make_report(res).mae;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome dedup_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> nneg(0, 50), npos(0, 20);
  std::uniform_real_distribution<double> tau(0.05, 1.0);
  int mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto neg = excount::testing::random_scored(rng, nneg(rng));
    const auto pos = excount::testing::random_scored(rng, npos(rng));
    const double tv = tau(rng);
    if (!excount::testing::same_boxes(dedup_negatives(neg, pos, tv), excount::testing::brute_dedup(neg, pos, tv))) {
      ++mismatches;
    }
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 10.0, fmt("1000 instances, %d mismatches, %.2f s (limit 10 s)", mismatches, secs)};
}

DensityMap map2x2(double a, double b, double c, double d) {
  DensityMap m(2, 2);
  m.grid = {a, b, c, d};
  return m;
}

Outcome loss_fixed_points() {
  const DensityMap g = map2x2(1, 0, 2, 0);
  const double eq = contrastive_from_similarities(0.3, 0.3);
  const double eq_maps = contrastive_loss(g, g, g);
  // Closed forms: sim_pos 1 against sim_neg -1 and 0 give log(1 + e^-2) and log(1 + e^-1).
  const double c1 = contrastive_loss(g, g, map2x2(-1, 0, -2, 0));
  const double c2 = contrastive_loss(g, g, map2x2(0, 5, 0, 1));
  const double err_ln2 = std::max(std::abs(eq - std::log(2.0)), std::abs(eq_maps - std::log(2.0)));
  const bool ok = err_ln2 <= 1e-9 && std::abs(c1 - std::log1p(std::exp(-2.0))) <= 1e-6 &&
                  std::abs(c2 - std::log1p(std::exp(-1.0))) <= 1e-6 && std::abs(c1 - 0.126928) <= 1e-6 &&
                  std::abs(c2 - 0.313262) <= 1e-6;
  return {ok, fmt("ln2 err %.1e, case(1,-1)=%.6f, case(1,0)=%.6f", err_ln2, c1, c2)};
}

CounterConfig tiny_counter() {
  CounterConfig c;
  c.image_size = 16;
  c.exemplar_size = 16;
  c.embed_dim = 8;
  c.heads = 2;
  c.mlp_hidden = 8;
  c.encoder_channels = {4, 4, 4};
  c.decoder_channels = {6, 4, 4, 3};
  c.density_scale = 50;
  c.output_bias_init = -1;
  c.seed = 3;
  return c;
}

Outcome gradient_check() {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst_map = 0;
  for (int t = 0; t < 100; ++t) {
    DensityMap p(8, 8), g(8, 8), q(8, 8);
    for (auto& v : p.grid) v = n(rng);
    for (auto& v : g.grid) v = n(rng);
    for (auto& v : q.grid) v = n(rng);
    LossGradients grads;
    total_loss(p, g, &q, &grads);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double np = central_diff([&](double h) {
        DensityMap x = p;
        x.grid[i] += h;
        return total_loss(x, g, &q).l_total;
      });
      const double nq = central_diff([&](double h) {
        DensityMap x = q;
        x.grid[i] += h;
        return total_loss(p, g, &x).l_total;
      });
      worst_map = std::max({worst_map, rel_error(grads.d_pos[i], np), rel_error(grads.d_neg[i], nq)});
    }
  }

  Counter m(tiny_counter());
  std::uniform_real_distribution<float> u(0, 1);
  auto noise_image = [&] {
    Image img(16, 16);
    for (auto& v : img.pixels) v = u(rng);
    return img;
  };
  const Image img = noise_image();
  const std::vector<Image> pos{noise_image(), noise_image()}, neg{noise_image()};
  const DensityMap gt = generate_density_map({{4, 5}, {10, 11}}, 16, 16, 2.0, 50);
  m.zero_grad();
  m.accumulate(img, gt, pos, &neg);
  double worst_e2e = 0;
  for (auto& p : m.params()) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double orig = p.value.data()[i];
      const double fd = central_diff([&](double h) {
        p.value.data()[i] = orig + h;
        const double l = total_loss(m.forward(img, pos), gt, std::optional<DensityMap>(m.forward(img, neg))).l_total;
        p.value.data()[i] = orig;
        return l;
      });
      worst_e2e = std::max(worst_e2e, rel_error(p.grad.data()[i], fd));
    }
  }
  return {worst_map <= 1e-6 && worst_e2e <= 1e-4,
          fmt("8x8 maps: max rel err %.2e (limit 1e-6); 16x16 counter: %.2e (limit 1e-4)", worst_map, worst_e2e)};
}

Outcome counting_invariant() {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> side(4, 96), npts(0, 60);
  std::uniform_real_distribution<double> sig(0.5, 8.0), unit(0.0, 1.0);
  double worst = 0;
  int failures = 0;
  for (int t = 0; t < 500; ++t) {
    const int h = side(rng), w = side(rng);
    std::vector<Point> pts(npts(rng));
    for (std::size_t i = 0; i < pts.size(); ++i) {
      // Every fourth point hugs a border.
      if (i % 4 == 0) {
        pts[i] = {unit(rng) < 0.5 ? 0.0 : w - 1e-9, unit(rng) * (h - 1e-9)};
      } else {
        pts[i] = {unit(rng) * (w - 1e-9), unit(rng) * (h - 1e-9)};
      }
    }
    const double scale = 1 + 99 * unit(rng);
    const double got = count_from_density(generate_density_map(pts, h, w, sig(rng), scale));
    const double err = std::abs(got - static_cast<double>(pts.size()));
    worst = std::max(worst, err);
    failures += err > 1e-3 * static_cast<double>(pts.size()) + 1e-6;
  }
  return {failures == 0, fmt("500 point sets, %d outside tolerance, max abs err %.2e", failures, worst)};
}

// Returns a fixed candidate list per prompt, thresholded like a real detector.
class FixedDetector final : public Detector {
 public:
  std::vector<ScoredBox> positives, generic;
  DetectionResponse detect(const DetectionRequest& r) const override {
    DetectionResponse out;
    for (const auto& b : r.prompt == kGenericPrompt ? generic : positives)
      if (b.logit >= r.logit_threshold) out.boxes.push_back(b);
    return out;
  }
  std::string id() const override { return "fixed"; }
};

bool subset_of(const std::vector<ScoredBox>& a, const std::vector<ScoredBox>& b) {
  return std::all_of(a.begin(), a.end(), [&](const ScoredBox& x) {
    return std::any_of(b.begin(), b.end(), [&](const ScoredBox& y) { return x.box == y.box && x.logit == y.logit; });
  });
}

Outcome threshold_monotonicity() {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> npos(1, 20), nneg(0, 50);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Image image(100, 100, 0.5f);
  int tau_l_violations = 0, tau_iou_violations = 0;
  for (int t = 0; t < 500; ++t) {
    FixedDetector det;
    det.positives = excount::testing::random_scored(rng, npos(rng), 90, 30);
    det.generic = excount::testing::random_scored(rng, nneg(rng), 90, 30);
    // Some generic boxes are near-copies of positives so dedup has work to do.
    for (std::size_t i = 0; i < det.positives.size(); i += 2) det.generic.push_back(det.positives[i]);
    PipelineConfig lo, hi;
    lo.tau_l = unit(rng) * 0.5;
    hi.tau_l = lo.tau_l + unit(rng) * 0.5;
    const Candidates a = propose_candidates(det, "x", image, "t", lo);
    const Candidates b = propose_candidates(det, "x", image, "t", hi);
    if (!subset_of(b.positives, a.positives) || !subset_of(b.negatives_raw, a.negatives_raw)) ++tau_l_violations;

    const double i1 = 0.05 + unit(rng) * 0.9, i2 = i1 + unit(rng) * (1.0 - i1);
    const auto kept1 = dedup_negatives(a.negatives_raw, a.positives, i1);
    const auto kept2 = dedup_negatives(a.negatives_raw, a.positives, i2);
    if (!subset_of(kept1, kept2)) ++tau_iou_violations;
  }
  return {tau_l_violations == 0 && tau_iou_violations == 0,
          fmt("500 candidate sets, tau_l violations %d, tau_iou violations %d", tau_l_violations, tau_iou_violations)};
}

Outcome single_object_filter() {
  SyntheticSpec spec;
  spec.images_per_class = 34;
  const Dataset ds = synthesize_dataset(spec, 41);
  const LabeledPatchSet set = build_training_set(ds, 41);
  const RandomProjectionBackbone bb;
  const FilterTrainResult r = train_filter(set, bb);

  LabeledPatchSet shuffled = set;
  std::vector<PatchLabel> labels;
  for (const auto& p : shuffled.patches) labels.push_back(p.label);
  std::mt19937_64 rng(42);
  std::shuffle(labels.begin(), labels.end(), rng);
  for (std::size_t i = 0; i < labels.size(); ++i) shuffled.patches[i].label = labels[i];
  const FilterTrainResult c = train_filter(shuffled, bb);

  const std::size_t singles = set.count(PatchLabel::Single), multis = set.count(PatchLabel::Multi);
  const double train_share = static_cast<double>(set.count(SplitTag::Train)) / static_cast<double>(set.patches.size());
  const bool ok = singles >= 300 && multis >= 300 && std::abs(train_share - 0.7) < 0.02 && r.eval_accuracy >= 0.9 &&
                  c.eval_accuracy >= 0.4 && c.eval_accuracy <= 0.6;
  return {ok, fmt("%zu singles, %zu multis, train share %.3f, held-out acc %.3f (>= 0.90), shuffled control %.3f "
                  "(in [0.4, 0.6])",
                  singles, multis, train_share, r.eval_accuracy, c.eval_accuracy)};
}

Outcome end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = desk_dataset(1);
  const SyntheticDetector det = synthetic_detector_for(ds);
  const Experiment e = run_experiment(ds, det, nullptr, desk_config(1));
  const double secs = seconds_since(t0);
  const double base = mean_baseline_mae(ds);
  const double ratio = e.test.mae / base;
  return {ratio <= 0.5 && secs <= 900,
          fmt("test MAE %.3f, mean baseline MAE %.3f, ratio %.3f (<= 0.5), %.0f s (<= 900 s)", e.test.mae, base, ratio,
              secs)};
}

Outcome noise_suppression() {
  std::vector<double> ld, ldlc;
  std::string per_seed;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const Dataset ds = desk_dataset(100 + s, 0.5);
    const SyntheticDetector det = synthetic_detector_for(ds);
    TrainConfig cfg = desk_config(s);
    cfg.loss = LossMode::DensityOnly;
    ld.push_back(run_experiment(ds, det, nullptr, cfg).test.mae);
    cfg.loss = LossMode::DensityContrastive;
    ldlc.push_back(run_experiment(ds, det, nullptr, cfg).test.mae);
    per_seed += fmt(" %.2f/%.2f", ld.back(), ldlc.back());
  }
  const double a = median(ld), b = median(ldlc);
  return {b <= a, fmt("median test MAE ld %.3f, ld+lc %.3f; per seed (ld/ld+lc):%s", a, b, per_seed.c_str())};
}

Outcome baseline_ordering() {
  const Dataset ds = desk_dataset(1);
  NoiseSpec noise;
  noise.merge_rate = 0.3;
  noise.spurious = 8;
  noise.seed = 1;
  const SyntheticDetector det = synthetic_detector_for(ds, noise);

  const auto train = ds.indices(SplitPart::Train);
  const auto test = ds.indices(SplitPart::Test);
  CurationConfig cur;
  cur.background_crops = 1;
  const auto backbone = std::make_shared<RandomProjectionBackbone>();
  const FilterTrainResult fr = train_filter(build_training_set(ds, 1, cur, &train), *backbone);
  const TrainedFilter filter(backbone, fr.head);

  TrainConfig cfg = desk_config(1);
  cfg.pipeline.use_filter = true;
  const double raw = evaluate_detect_count(ds, test, det, nullptr, cfg.pipeline, "test").mae;
  const double filtered = evaluate_detect_count(ds, test, det, &filter, cfg.pipeline, "test").mae;
  const double counter = run_experiment(ds, det, &filter, cfg).test.mae;
  return {raw > filtered && filtered > counter,
          fmt("test MAE detect-count %.3f > filtered %.3f > counter %.3f", raw, filtered, counter)};
}

Outcome sweep_tables() {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = desk_dataset(1);
  const SyntheticDetector det = synthetic_detector_for(ds);
  std::string shape;
  bool ok = true;
  for (SweepParam p : {SweepParam::TauIou, SweepParam::TauL}) {
    const SweepTable t = sweep(ds, det, nullptr, desk_config(1), p, default_sweep_values(p));
    const std::string text = sweep_text(t), csv = sweep_csv(t);
    const std::size_t want = p == SweepParam::TauIou ? 9 : 5;
    const bool marked = std::count(text.begin(), text.end(), '*') == 1 && text.find('[') != std::string::npos;
    const bool avg = csv.find("avg_mae,avg_rmse") != std::string::npos && text.find("Avg") != std::string::npos;
    ok = ok && t.rows.size() == want && marked && avg;
    shape += fmt(" %s: %zu rows, best %s=%.2f;", sweep_param_name(p), t.rows.size(), sweep_param_name(p),
                 t.rows[t.best].value);
    std::cout << text;
  }
  const double secs = seconds_since(t0);
  ok = ok && secs <= 45 * 60;
  return {ok, fmt("%s %.0f s (<= 2700 s)", shape.c_str(), secs)};
}

template <typename F>
bool rejects_with_offset(F&& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return std::string(e.what()).find("offset") != std::string::npos;
  }
  return false;
}

Outcome format_round_trips() {
  const DensityMap d = generate_density_map({{3.5, 4.25}, {10, 2}}, 12, 17, 2.0, 60);
  const std::string db = write_density(d);
  const bool density_ok = write_density(read_density(db)) == db;
  const std::string cb = write_checkpoint(Counter(tiny_counter()), {{"note", "acceptance"}});
  const LoadedCheckpoint ck = read_checkpoint(cb);
  const bool ckpt_ok = write_checkpoint(ck.counter, ck.metadata) == cb;

  int located = 0, cases = 0;
  for (const std::string& bad : {std::string("XXXX") + db.substr(4), db.substr(0, db.size() - 3), db + "x"}) {
    ++cases;
    located += rejects_with_offset([&] { read_density(bad); });
  }
  for (const std::string& bad : {std::string("XXXX") + cb.substr(4), cb.substr(0, cb.size() - 5), cb + "zz"}) {
    ++cases;
    located += rejects_with_offset([&] { read_checkpoint(bad); });
  }
  return {density_ok && ckpt_ok && located == cases,
          fmt("density %s, checkpoint %s, %d/%d corruptions rejected with offsets", density_ok ? "identical" : "DIFFERS",
              ckpt_ok ? "identical" : "DIFFERS", located, cases)};
}

}  // namespace

// Optional arguments select criteria by number; default runs all.
int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"dedup matches brute-force oracle", dedup_oracle},
      {"loss fixed points", loss_fixed_points},
      {"gradient check", gradient_check},
      {"counting invariant", counting_invariant},
      {"threshold monotonicity", threshold_monotonicity},
      {"single-object filter benchmark", single_object_filter},
      {"end-to-end synthetic counting", end_to_end},
      {"noise-suppression trend", noise_suppression},
      {"detector-baseline ordering", baseline_ordering},
      {"sweep tables", sweep_tables},
      {"format round-trips", format_round_trips},
  };
  std::vector<std::size_t> chosen;
  for (int a = 1; a < argc; ++a) chosen.push_back(std::stoul(argv[a]) - 1);
  if (chosen.empty()) {
    chosen.resize(criteria.size());
    std::iota(chosen.begin(), chosen.end(), 0);
  }
  int failed = 0;
  for (std::size_t i : chosen) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  std::cout << chosen.size() - failed << "/" << chosen.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
