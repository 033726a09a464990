// Command-line front end: dataset synthesis, exemplar selection, filter and
// counter training, evaluation, threshold sweeps and overlay rendering.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "excount/excount.hpp"

namespace fs = std::filesystem;
using namespace excount;

namespace {

struct Common {
  std::string data;
  std::string class_map;
  std::string config;
  std::string detector = "synthetic";
  std::string filter_head;
  bool no_filter = false;
  std::optional<double> tau_l, tau_iou;
  std::optional<int> k;
  std::optional<std::string> fallback;
};

struct Overrides {
  std::optional<double> lr, sigma, scale, weight_decay;
  std::optional<int> batch_size, epochs;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> loss;
};

nlohmann::json read_json_file(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

Dataset open_dataset(const Common& c) {
  if (c.class_map.empty()) return load_dataset(c.data);
  return load_dataset(c.data, std::filesystem::path(c.class_map));
}

void add_common(CLI::App* app, Common& c, bool needs_detector) {
  app->add_option("--data,--dataset", c.data, "Dataset directory")->required();
  app->add_option("--class-map", c.class_map, "Class-map text file (image -> class)");
  app->add_option("--config", c.config, "JSON config file; flags override its values");
  if (!needs_detector) return;
  app->add_option("--detector", c.detector, "synthetic | external:<cmd:...|http://...>");
  app->add_option("--filter", c.filter_head, "Trained single-object filter head");
  app->add_flag("--no-filter", c.no_filter, "Skip single-object filtering");
  app->add_option("--tau-l", c.tau_l, "Detector logit threshold");
  app->add_option("--tau-iou", c.tau_iou, "Negative dedup IoU threshold");
  app->add_option("-k", c.k, "Exemplars per stream");
  app->add_option("--fallback", c.fallback, "ladder | strict")->check(CLI::IsMember({"ladder", "strict"}));
}

void add_overrides(CLI::App* app, Overrides& o) {
  app->add_option("--lr", o.lr);
  app->add_option("--batch-size", o.batch_size);
  app->add_option("--epochs", o.epochs);
  app->add_option("--seed", o.seed);
  app->add_option("--sigma", o.sigma);
  app->add_option("--scale", o.scale, "Density scale factor");
  app->add_option("--weight-decay", o.weight_decay);
  app->add_option("--loss", o.loss, "ld | ld+lc")->check(CLI::IsMember({"ld", "ld+lc"}));
}

TrainConfig load_train_config(const Common& c, const Overrides& o = {}) {
  TrainConfig cfg = read_json_file(c.config).get<TrainConfig>();
  if (c.tau_l) cfg.pipeline.tau_l = *c.tau_l;
  if (c.tau_iou) cfg.pipeline.tau_iou = *c.tau_iou;
  if (c.k) cfg.pipeline.k = *c.k;
  if (c.fallback) cfg.pipeline.fallback = *c.fallback == "strict" ? FallbackPolicy::Strict : FallbackPolicy::Ladder;
  if (c.no_filter) cfg.pipeline.use_filter = false;
  if (o.lr) cfg.lr = *o.lr;
  if (o.batch_size) cfg.batch_size = *o.batch_size;
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.seed) cfg.seed = *o.seed;
  if (o.sigma) cfg.sigma = *o.sigma;
  if (o.scale) cfg.counter.density_scale = *o.scale;
  if (o.weight_decay) cfg.weight_decay = *o.weight_decay;
  if (o.loss) cfg.loss = parse_loss_mode(*o.loss);
  validate(cfg);
  return cfg;
}

std::unique_ptr<Detector> make_detector(const Common& c, const Dataset& ds) {
  const std::string endpoint = resolve_detector_endpoint(c.detector);
  if (endpoint.empty()) {
    const auto cfg = read_json_file(c.config);
    const NoiseSpec noise = cfg.contains("noise") ? cfg.at("noise").get<NoiseSpec>() : NoiseSpec{};
    return std::make_unique<SyntheticDetector>(synthetic_detector_for(ds, noise));
  }
  return std::make_unique<ExternalDetector>(endpoint);
}

std::unique_ptr<PatchClassifier> make_filter(const Common& c, bool use_filter) {
  if (!use_filter) return nullptr;
  if (c.filter_head.empty()) throw UsageError("--filter <head file> is required unless --no-filter is given");
  return std::make_unique<TrainedFilter>(std::make_shared<RandomProjectionBackbone>(),
                                         read_filter_head(read_file_bytes(c.filter_head)));
}

std::vector<std::size_t> all_indices(const Dataset& ds) {
  std::vector<std::size_t> v(ds.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_bytes(path, text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-shot object counting with mined exemplars"};
  app.require_subcommand(1);

  // make-synthetic
  std::string spec_path, out;
  std::uint64_t seed = 0;
  auto* mk = app.add_subcommand("make-synthetic", "Generate a synthetic counting dataset");
  mk->add_option("--spec", spec_path, "Synthetic spec JSON")->required();
  mk->add_option("--seed", seed);
  mk->add_option("--out", out, "Output directory")->required();

  // select-exemplars
  Common sel_c;
  std::string sel_out;
  bool no_patches = false;
  auto* sel = app.add_subcommand("select-exemplars", "Mine positive and negative exemplars for every image");
  add_common(sel, sel_c, true);
  sel->add_option("--out", sel_out, "Exemplar cache directory")->required();
  sel->add_flag("--no-patches", no_patches, "Write only the JSON-lines records");

  // train-filter
  Common tf_c;
  std::string tf_out;
  FilterTrainConfig tf_cfg;
  CurationConfig cur_cfg;
  auto* tf = app.add_subcommand("train-filter", "Train the single-object patch classifier");
  add_common(tf, tf_c, false);
  tf->add_option("--out", tf_out, "Filter head output file")->required();
  tf->add_option("--epochs", tf_cfg.epochs);
  tf->add_option("--lr", tf_cfg.lr);
  tf->add_option("--batch-size", tf_cfg.batch_size);
  tf->add_option("--seed", tf_cfg.seed);
  tf->add_option("--train-fraction", cur_cfg.train_fraction);

  // train-counter
  Common tc_c;
  Overrides tc_o;
  std::string tc_ex, tc_out, tc_log;
  auto* tc = app.add_subcommand("train-counter", "Fine-tune the counter on cached exemplars");
  add_common(tc, tc_c, false);
  add_overrides(tc, tc_o);
  tc->add_option("--exemplars", tc_ex, "Exemplar cache directory")->required();
  tc->add_option("--out", tc_out, "Checkpoint output file")->required();
  tc->add_option("--log", tc_log, "Per-epoch JSON-lines log (default: stdout)");

  // evaluate
  Common ev_c;
  std::string ev_mode = "counter", ev_split = "test", ev_ckpt, ev_ex, ev_out;
  bool detector_only = false;
  auto* ev = app.add_subcommand("evaluate", "MAE/RMSE on a split");
  add_common(ev, ev_c, true);
  ev->add_option("--mode", ev_mode, "counter | detect-count")->check(CLI::IsMember({"counter", "detect-count"}));
  ev->add_flag("--detector-only", detector_only, "Same as --mode detect-count");
  ev->add_option("--split", ev_split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--checkpoint", ev_ckpt);
  ev->add_option("--exemplars", ev_ex, "Exemplar cache directory");
  ev->add_option("--out", ev_out, "Report prefix (writes .json and .csv)");

  // sweep
  Common sw_c;
  Overrides sw_o;
  std::string sw_param, sw_out;
  std::vector<double> sw_values;
  auto* sw = app.add_subcommand("sweep", "Train and evaluate across threshold values");
  add_common(sw, sw_c, true);
  add_overrides(sw, sw_o);
  sw->add_option("--param", sw_param, "tau_iou | tau_l")->required()->check(CLI::IsMember({"tau_iou", "tau_l"}));
  sw->add_option("--values", sw_values, "Values to sweep (default: 0.1..0.9 or 0.01..0.05)");
  sw->add_option("--out", sw_out, "Output prefix (writes .csv and .txt)");

  // render
  Common rd_c;
  std::string rd_image, rd_ckpt, rd_ex, rd_out, rd_density;
  bool rd_boxes = false;
  auto* rd = app.add_subcommand("render", "Overlay a predicted density map on its image");
  add_common(rd, rd_c, false);
  rd->add_option("--image", rd_image, "Image id")->required();
  rd->add_option("--checkpoint", rd_ckpt)->required();
  rd->add_option("--exemplars", rd_ex, "Exemplar cache directory")->required();
  rd->add_option("--out", rd_out, "Output PPM")->required();
  rd->add_option("--density-out", rd_density, "Also write the density map file");
  rd->add_flag("--boxes", rd_boxes, "Draw the positive exemplar boxes");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*mk) {
      const SyntheticSpec spec = read_json_file(spec_path).get<SyntheticSpec>();
      const Dataset ds = synthesize_dataset(spec, seed);
      save_dataset(ds, out);
      std::cout << nlohmann::json{{"images", ds.size()}, {"out", out}}.dump() << '\n';
    } else if (*sel) {
      const Dataset ds = open_dataset(sel_c);
      const TrainConfig cfg = load_train_config(sel_c);
      const auto detector = make_detector(sel_c, ds);
      const auto filter = make_filter(sel_c, cfg.pipeline.use_filter);
      const auto idx = all_indices(ds);
      const auto pairs = build_dataset_exemplars(ds, idx, *detector, filter.get(), cfg.pipeline);
      write_exemplar_cache(sel_out, ds, idx, pairs, !no_patches);
      std::size_t relaxed = 0, no_neg = 0;
      for (const auto& p : pairs) {
        relaxed += p.positive_fallback != PositiveFallback::None ? 1 : 0;
        no_neg += p.contrastive_enabled() ? 0 : 1;
      }
      std::cout << nlohmann::json{{"images", pairs.size()}, {"positive_fallbacks", relaxed}, {"contrastive_disabled", no_neg}}
                       .dump()
                << '\n';
    } else if (*tf) {
      const Dataset ds = open_dataset(tf_c);
      const auto train = ds.indices(SplitPart::Train);
      const LabeledPatchSet set = build_training_set(ds, tf_cfg.seed, cur_cfg, &train);
      RandomProjectionBackbone backbone;
      const FilterTrainResult r = train_filter(set, backbone, tf_cfg);
      write_text(tf_out, write_filter_head(r.head));
      std::cout << nlohmann::json{{"singles", set.count(PatchLabel::Single)},
                                  {"multis", set.count(PatchLabel::Multi)},
                                  {"class_disjoint", set.class_disjoint},
                                  {"train_accuracy", r.train_accuracy},
                                  {"eval_accuracy", r.eval_accuracy}}
                       .dump()
                << '\n';
    } else if (*tc) {
      const Dataset ds = open_dataset(tc_c);
      const TrainConfig cfg = load_train_config(tc_c, tc_o);
      const ExemplarMap pairs = read_exemplar_cache(tc_ex, ds, cfg.pipeline.exemplar_size);
      std::ofstream log_file;
      std::ostream* log = &std::cout;
      if (!tc_log.empty()) {
        log_file.open(tc_log);
        log = &log_file;
      }
      const TrainResult r = train_counter(ds, ds.indices(SplitPart::Train), ds.indices(SplitPart::Val), pairs, cfg, log);
      write_text(tc_out, write_checkpoint(r.counter, checkpoint_metadata(cfg, r)));
    } else if (*ev) {
      const Dataset ds = open_dataset(ev_c);
      const auto idx = ds.indices(parse_split_part(ev_split));
      EvalReport rep;
      if (detector_only || ev_mode == "detect-count") {
        const TrainConfig cfg = load_train_config(ev_c);
        const auto detector = make_detector(ev_c, ds);
        const auto filter = make_filter(ev_c, cfg.pipeline.use_filter);
        rep = evaluate_detect_count(ds, idx, *detector, filter.get(), cfg.pipeline, ev_split);
        rep.config_hash = config_hash(cfg);
      } else {
        if (ev_ckpt.empty() || ev_ex.empty()) throw UsageError("counter mode needs --checkpoint and --exemplars");
        const LoadedCheckpoint ck = read_checkpoint(read_file_bytes(ev_ckpt));
        const ExemplarMap pairs = read_exemplar_cache(ev_ex, ds, ck.counter.config().exemplar_size);
        rep = evaluate_counter(ck.counter, ds, idx, pairs, ev_split, ck.metadata.value("config_hash", ""));
      }
      if (!ev_out.empty()) {
        write_text(ev_out + ".json", report_json(rep).dump(2) + "\n");
        write_text(ev_out + ".csv", report_csv(rep));
      }
      std::cout << nlohmann::json{{"split", rep.split}, {"mae", rep.mae}, {"rmse", rep.rmse}, {"config_hash", rep.config_hash}}
                       .dump()
                << '\n';
    } else if (*sw) {
      const Dataset ds = open_dataset(sw_c);
      const TrainConfig cfg = load_train_config(sw_c, sw_o);
      const auto detector = make_detector(sw_c, ds);
      const auto filter = make_filter(sw_c, cfg.pipeline.use_filter);
      const SweepParam param = parse_sweep_param(sw_param);
      const auto values = sw_values.empty() ? default_sweep_values(param) : sw_values;
      const SweepTable table = sweep(ds, *detector, filter.get(), cfg, param, values, &std::cerr);
      if (!sw_out.empty()) {
        write_text(sw_out + ".csv", sweep_csv(table));
        write_text(sw_out + ".txt", sweep_text(table));
      }
      std::cout << sweep_text(table);
    } else if (*rd) {
      const Dataset ds = open_dataset(rd_c);
      const auto i = ds.index_of(rd_image);
      if (!i) throw UsageError("unknown image id '" + rd_image + "'");
      const LoadedCheckpoint ck = read_checkpoint(read_file_bytes(rd_ckpt));
      const ExemplarMap pairs = read_exemplar_cache(rd_ex, ds, ck.counter.config().exemplar_size);
      const ExemplarPair& p = pair_for(pairs, rd_image);
      const DensityMap d = ck.counter.forward(ds.images[*i], p.positive_patches());
      std::vector<Box> boxes;
      if (rd_boxes)
        for (const auto& e : p.positives) boxes.push_back(e.source.box);
      write_overlay(rd_out, ds.images[*i], d, boxes);
      if (!rd_density.empty()) write_text(rd_density, write_density(d));
      std::cout << nlohmann::json{{"image", rd_image}, {"count", count_from_density(d)}}.dump() << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
