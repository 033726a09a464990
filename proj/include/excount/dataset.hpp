#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "excount/density.hpp"
#include "excount/error.hpp"
#include "excount/geometry.hpp"
#include "excount/image.hpp"
#include "excount/scene.hpp"

namespace excount {

struct CountingRecord {
  std::string image_id;
  std::string image_path;  // relative to the dataset root
  std::string class_name;
  int width = 0;
  int height = 0;
  std::vector<Point> points;
  std::vector<Box> exemplar_boxes;  // annotated exemplars, training ground truth only

  std::size_t count() const { return points.size(); }
};

enum class SplitPart { Train, Val, Test };

inline const char* split_name(SplitPart p) {
  switch (p) {
    case SplitPart::Train: return "train";
    case SplitPart::Val: return "val";
    case SplitPart::Test: return "test";
  }
  return "?";
}

inline SplitPart parse_split_part(const std::string& s) {
  if (s == "train") return SplitPart::Train;
  if (s == "val") return SplitPart::Val;
  if (s == "test") return SplitPart::Test;
  throw ConfigError("unknown split '" + s + "' (expected train|val|test)");
}

// Records plus, for each, its image and (for synthetic data) the oracle scene.
struct Dataset {
  std::filesystem::path root;
  std::vector<CountingRecord> records;
  std::vector<Image> images;  // parallel to records
  std::map<std::string, SyntheticScene> scenes;
  std::map<std::string, SplitPart> split_of;

  std::size_t size() const { return records.size(); }

  std::optional<std::size_t> index_of(const std::string& image_id) const {
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].image_id == image_id) return i;
    return std::nullopt;
  }

  std::vector<std::size_t> indices(SplitPart part) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto it = split_of.find(records[i].image_id);
      if (it != split_of.end() && it->second == part) out.push_back(i);
    }
    return out;
  }
};

struct SplitRatios {
  double train = 6, val = 2, test = 2;
};

struct ClassPartition {
  std::vector<std::string> train, val, test;
};

// Seeded shuffle of the class set, cut by class-count ratios. Each part gets at
// least one class.
inline ClassPartition partition_classes(std::vector<std::string> classes, SplitRatios ratios,
                                        std::uint64_t seed) {
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  const std::size_t n = classes.size();
  if (n < 3) throw ConfigError("class-disjoint split needs at least 3 classes, got " + std::to_string(n));
  if (!(ratios.train > 0 && ratios.val > 0 && ratios.test > 0)) {
    throw ConfigError("split ratios must be positive");
  }
  std::mt19937_64 rng(mix_seed(seed, 0x5917));
  std::shuffle(classes.begin(), classes.end(), rng);
  const double total = ratios.train + ratios.val + ratios.test;
  auto n_train = static_cast<std::size_t>(std::lround(n * ratios.train / total));
  auto n_val = static_cast<std::size_t>(std::lround(n * ratios.val / total));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 2);
  n_val = std::clamp<std::size_t>(n_val, 1, n - n_train - 1);
  ClassPartition p;
  p.train.assign(classes.begin(), classes.begin() + n_train);
  p.val.assign(classes.begin() + n_train, classes.begin() + n_train + n_val);
  p.test.assign(classes.begin() + n_train + n_val, classes.end());
  return p;
}

struct DatasetSplit {
  std::vector<CountingRecord> train, val, test;
  ClassPartition classes;
};

inline DatasetSplit split_by_class(const std::vector<CountingRecord>& records, SplitRatios ratios,
                                   std::uint64_t seed) {
  std::vector<std::string> names;
  for (const auto& r : records) names.push_back(r.class_name);
  DatasetSplit s;
  s.classes = partition_classes(names, ratios, seed);
  const std::set<std::string> tr(s.classes.train.begin(), s.classes.train.end());
  const std::set<std::string> va(s.classes.val.begin(), s.classes.val.end());
  for (const auto& r : records) {
    if (tr.count(r.class_name)) s.train.push_back(r);
    else if (va.count(r.class_name)) s.val.push_back(r);
    else s.test.push_back(r);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic dataset generation

struct SyntheticSpec {
  std::vector<std::string> classes{"circle", "square", "triangle"};
  std::vector<std::string> distractor_classes;  // empty: every catalog shape not in `classes`
  int images_per_class = 10;
  int count_min = 3;
  int count_max = 12;
  double distractor_rate = 0.0;  // distractors per target object
  int image_size = 64;
  double radius_min = 3.0;
  double radius_max = 5.0;
  SplitRatios split_ratios{1, 1, 1};
  // When set, images are allotted per split (round-robin over that split's classes)
  // instead of images_per_class.
  std::optional<std::array<int, 3>> split_images;
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = nlohmann::json{{"classes", s.classes},
                     {"distractor_classes", s.distractor_classes},
                     {"images_per_class", s.images_per_class},
                     {"count_min", s.count_min},
                     {"count_max", s.count_max},
                     {"distractor_rate", s.distractor_rate},
                     {"image_size", s.image_size},
                     {"radius_min", s.radius_min},
                     {"radius_max", s.radius_max},
                     {"split_ratios", {s.split_ratios.train, s.split_ratios.val, s.split_ratios.test}}};
  if (s.split_images) {
    j["split_images"] = {{"train", (*s.split_images)[0]}, {"val", (*s.split_images)[1]}, {"test", (*s.split_images)[2]}};
  }
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  s = SyntheticSpec{};
  if (j.contains("classes")) s.classes = j["classes"].get<std::vector<std::string>>();
  if (j.contains("distractor_classes")) s.distractor_classes = j["distractor_classes"].get<std::vector<std::string>>();
  s.images_per_class = j.value("images_per_class", s.images_per_class);
  s.count_min = j.value("count_min", s.count_min);
  s.count_max = j.value("count_max", s.count_max);
  s.distractor_rate = j.value("distractor_rate", s.distractor_rate);
  s.image_size = j.value("image_size", s.image_size);
  s.radius_min = j.value("radius_min", s.radius_min);
  s.radius_max = j.value("radius_max", s.radius_max);
  if (j.contains("split_ratios")) {
    const auto r = j["split_ratios"].get<std::vector<double>>();
    if (r.size() != 3) throw ConfigError("split_ratios must have 3 entries");
    s.split_ratios = {r[0], r[1], r[2]};
  }
  if (j.contains("split_images")) {
    const auto& si = j["split_images"];
    if (si.is_array()) {
      if (si.size() != 3) throw ConfigError("split_images must have 3 entries (train, val, test)");
      s.split_images = std::array<int, 3>{si[0].get<int>(), si[1].get<int>(), si[2].get<int>()};
    } else {
      s.split_images = std::array<int, 3>{si.at("train").get<int>(), si.at("val").get<int>(), si.at("test").get<int>()};
    }
  }
}

namespace detail {

inline SyntheticScene generate_scene(const SyntheticSpec& spec, const std::string& target,
                                     const std::vector<std::string>& distractor_pool,
                                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  SyntheticScene scene;
  scene.width = scene.height = spec.image_size;
  scene.seed = seed;
  const double bg_hue = u01(rng) * 360.0;
  scene.background = hsv_to_rgb(bg_hue, 0.3 * u01(rng), 0.1 + 0.15 * u01(rng));
  const double target_hue = u01(rng) * 360.0;
  const Rgb target_color = hsv_to_rgb(target_hue, 0.7 + 0.3 * u01(rng), 0.75 + 0.25 * u01(rng));
  const Rgb distractor_color =
      hsv_to_rgb(target_hue + 90.0 + 180.0 * u01(rng), 0.7 + 0.3 * u01(rng), 0.75 + 0.25 * u01(rng));

  std::uniform_int_distribution<int> count_dist(spec.count_min, spec.count_max);
  const int n_target = count_dist(rng);
  int n_distractor = static_cast<int>(std::lround(spec.distractor_rate * n_target));
  if (distractor_pool.empty()) n_distractor = 0;
  const std::string distractor =
      distractor_pool.empty() ? std::string{} : distractor_pool[rng() % distractor_pool.size()];

  auto place = [&](const std::string& cls, const Rgb& color, bool is_distractor) {
    constexpr int kAttempts = 2000;
    constexpr double kGap = 2.0;
    for (int a = 0; a < kAttempts; ++a) {
      const double r = spec.radius_min + (spec.radius_max - spec.radius_min) * u01(rng);
      const double cx = r + (spec.image_size - 2 * r) * u01(rng);
      const double cy = r + (spec.image_size - 2 * r) * u01(rng);
      const bool free = std::all_of(scene.objects.begin(), scene.objects.end(), [&](const SceneObject& o) {
        return std::hypot(o.cx - cx, o.cy - cy) >= o.radius + r + kGap;
      });
      if (free) {
        scene.objects.push_back({cls, cx, cy, r, color, is_distractor});
        return;
      }
    }
    throw GenerationError("cannot pack " + std::to_string(n_target + n_distractor) + " objects into a " +
                          std::to_string(spec.image_size) + "px canvas");
  };
  for (int i = 0; i < n_target; ++i) place(target, target_color, false);
  for (int i = 0; i < n_distractor; ++i) place(distractor, distractor_color, true);
  return scene;
}

}  // namespace detail

// Seeded scenes with dot annotations at target centers and the first three
// target boxes as annotated exemplars. Pure function of (spec, seed).
inline Dataset synthesize_dataset(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.classes.size() < 3) throw ConfigError("synthetic spec needs at least 3 classes");
  for (const auto& c : spec.classes)
    if (!is_known_shape(c)) throw ConfigError("unknown shape class '" + c + "'");
  if (spec.count_min < 0 || spec.count_max < spec.count_min) throw ConfigError("invalid count range");
  if (spec.image_size < 16) throw ConfigError("image_size must be at least 16");
  if (!(spec.radius_min > 0) || spec.radius_max < spec.radius_min || 2 * spec.radius_max >= spec.image_size) {
    throw ConfigError("invalid radius range");
  }
  if (spec.distractor_rate < 0) throw ConfigError("distractor_rate must be nonnegative");

  std::vector<std::string> pool = spec.distractor_classes;
  if (pool.empty()) {
    for (const auto& s : kShapeCatalog) {
      const std::string name(s.name);
      if (std::find(spec.classes.begin(), spec.classes.end(), name) == spec.classes.end()) pool.push_back(name);
    }
  }

  const ClassPartition part = partition_classes(spec.classes, spec.split_ratios, seed);
  struct Plan {
    std::string cls;
    SplitPart split;
  };
  std::vector<Plan> plan;
  const std::array<const std::vector<std::string>*, 3> groups{&part.train, &part.val, &part.test};
  const std::array<SplitPart, 3> parts{SplitPart::Train, SplitPart::Val, SplitPart::Test};
  for (std::size_t g = 0; g < 3; ++g) {
    const auto& cls = *groups[g];
    if (spec.split_images) {
      for (int i = 0; i < (*spec.split_images)[g]; ++i) plan.push_back({cls[i % cls.size()], parts[g]});
    } else {
      for (const auto& c : cls)
        for (int i = 0; i < spec.images_per_class; ++i) plan.push_back({c, parts[g]});
    }
  }
  // Stable order: by split, then by class name within split as allotted.
  Dataset ds;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "img_%04zu", i);
    SyntheticScene scene = detail::generate_scene(spec, plan[i].cls, pool, mix_seed(seed, i + 1));
    CountingRecord rec;
    rec.image_id = id;
    rec.image_path = std::string("images/") + id + ".ppm";
    rec.class_name = plan[i].cls;
    rec.width = scene.width;
    rec.height = scene.height;
    for (const auto& o : scene.objects) {
      if (o.distractor) continue;
      rec.points.push_back({o.cx, o.cy});
      if (rec.exemplar_boxes.size() < 3) rec.exemplar_boxes.push_back(o.box());
    }
    const auto n = static_cast<int>(rec.points.size());
    if (n < spec.count_min || n > spec.count_max) throw GenerationError("post-check failed for " + rec.image_id);
    ds.images.push_back(render_scene(scene));
    ds.scenes[rec.image_id] = std::move(scene);
    ds.split_of[rec.image_id] = plan[i].split;
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// On-disk layout (FSC-147 style):
//   annotations.json  {id: {"points": [[x,y]], "box_examples": [[x0,y0,x1,y1]], "width", "height", "image"}}
//   class_map.txt     "<id>\t<class>" per line
//   split.json        {"train": [ids], "val": [ids], "test": [ids]}
//   scenes.json       synthetic oracle tables (synthetic datasets only)
//   images/<id>.ppm

inline void to_json(nlohmann::json& j, const Rgb& c) { j = {c.r, c.g, c.b}; }
inline void from_json(const nlohmann::json& j, Rgb& c) {
  c = {j.at(0).get<float>(), j.at(1).get<float>(), j.at(2).get<float>()};
}

inline void to_json(nlohmann::json& j, const SyntheticScene& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects) {
    objs.push_back({{"class", o.class_name}, {"cx", o.cx}, {"cy", o.cy}, {"radius", o.radius},
                    {"color", o.color}, {"distractor", o.distractor}});
  }
  j = {{"width", s.width}, {"height", s.height}, {"background", s.background}, {"seed", s.seed}, {"objects", objs}};
}

inline void from_json(const nlohmann::json& j, SyntheticScene& s) {
  s = {};
  s.width = j.at("width").get<int>();
  s.height = j.at("height").get<int>();
  s.background = j.at("background").get<Rgb>();
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& o : j.at("objects")) {
    s.objects.push_back({o.at("class").get<std::string>(), o.at("cx").get<double>(), o.at("cy").get<double>(),
                         o.at("radius").get<double>(), o.at("color").get<Rgb>(), o.at("distractor").get<bool>()});
  }
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  nlohmann::json ann = nlohmann::json::object();
  std::string class_map;
  nlohmann::json split{{"train", nlohmann::json::array()}, {"val", nlohmann::json::array()}, {"test", nlohmann::json::array()}};
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    nlohmann::json pts = nlohmann::json::array(), boxes = nlohmann::json::array();
    for (const auto& p : r.points) pts.push_back({p.x, p.y});
    for (const auto& b : r.exemplar_boxes) boxes.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
    ann[r.image_id] = {{"image", r.image_path}, {"width", r.width}, {"height", r.height},
                       {"points", pts}, {"box_examples", boxes}};
    class_map += r.image_id + "\t" + r.class_name + "\n";
    if (const auto it = ds.split_of.find(r.image_id); it != ds.split_of.end()) {
      split[split_name(it->second)].push_back(r.image_id);
    }
    if (i < ds.images.size()) write_ppm(root / r.image_path, ds.images[i]);
  }
  write_file_bytes(root / "annotations.json", ann.dump(1));
  write_file_bytes(root / "class_map.txt", class_map);
  write_file_bytes(root / "split.json", split.dump(1));
  if (!ds.scenes.empty()) {
    nlohmann::json sc = nlohmann::json::object();
    for (const auto& [id, s] : ds.scenes) sc[id] = s;
    write_file_bytes(root / "scenes.json", sc.dump());
  }
}

inline std::map<std::string, std::string> read_class_map(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open class map " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find_first_of("\t ");
    if (tab == std::string::npos) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected '<image>\\t<class>'");
    std::string cls = line.substr(tab + 1);
    cls.erase(0, cls.find_first_not_of("\t "));
    out[line.substr(0, tab)] = cls;
  }
  return out;
}

// Loads an annotated dataset. `box_examples` accepts [x0,y0,x1,y1] or a list of
// four [x,y] corners. Missing split.json leaves every record unsplit.
inline Dataset load_dataset(const std::filesystem::path& root, std::optional<std::filesystem::path> class_map_path = {}) {
  namespace fs = std::filesystem;
  Dataset ds;
  ds.root = root;
  nlohmann::json ann;
  try {
    ann = nlohmann::json::parse(read_file_bytes(root / "annotations.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("annotations.json: " + std::string(e.what()));
  }
  const auto classes = read_class_map(class_map_path.value_or(root / "class_map.txt"));
  for (const auto& [id, a] : ann.items()) {
    CountingRecord r;
    r.image_id = id;
    r.image_path = a.value("image", "images/" + id);
    const auto cit = classes.find(id);
    if (cit == classes.end()) throw FormatError("image " + id + " missing from class map");
    r.class_name = cit->second;
    Image img = read_ppm(root / r.image_path);
    r.width = img.width;
    r.height = img.height;
    for (const auto& p : a.at("points")) {
      const Point pt{p.at(0).get<double>(), p.at(1).get<double>()};
      if (!(pt.x >= 0 && pt.x < r.width && pt.y >= 0 && pt.y < r.height)) {
        throw FormatError("image " + id + ": point " + std::to_string(r.points.size()) + " outside the image");
      }
      r.points.push_back(pt);
    }
    if (a.contains("box_examples")) {
      for (const auto& b : a["box_examples"]) {
        Box box;
        if (b.size() == 4 && b[0].is_number()) {
          box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
        } else {
          box = {1e300, 1e300, -1e300, -1e300};
          for (const auto& c : b) {
            box.x_min = std::min(box.x_min, c.at(0).get<double>());
            box.y_min = std::min(box.y_min, c.at(1).get<double>());
            box.x_max = std::max(box.x_max, c.at(0).get<double>());
            box.y_max = std::max(box.y_max, c.at(1).get<double>());
          }
        }
        if (!box.valid()) throw FormatError("image " + id + ": invalid exemplar box");
        r.exemplar_boxes.push_back(box);
      }
    }
    ds.records.push_back(std::move(r));
    ds.images.push_back(std::move(img));
  }
  if (fs::exists(root / "split.json")) {
    const auto split = nlohmann::json::parse(read_file_bytes(root / "split.json"));
    for (const char* part : {"train", "val", "test"}) {
      if (!split.contains(part)) continue;
      for (const auto& id : split[part]) ds.split_of[id.get<std::string>()] = parse_split_part(part);
    }
  }
  if (fs::exists(root / "scenes.json")) {
    const auto sc = nlohmann::json::parse(read_file_bytes(root / "scenes.json"));
    for (const auto& [id, s] : sc.items()) ds.scenes[id] = s.get<SyntheticScene>();
  }
  return ds;
}

// Assigns records to splits by class using split_by_class semantics.
inline void assign_class_split(Dataset& ds, SplitRatios ratios, std::uint64_t seed) {
  const DatasetSplit s = split_by_class(ds.records, ratios, seed);
  ds.split_of.clear();
  for (const auto& r : s.train) ds.split_of[r.image_id] = SplitPart::Train;
  for (const auto& r : s.val) ds.split_of[r.image_id] = SplitPart::Val;
  for (const auto& r : s.test) ds.split_of[r.image_id] = SplitPart::Test;
}

inline DensityMap ground_truth_density(const CountingRecord& r, double sigma, double scale) {
  return generate_density_map(r.points, r.height, r.width, sigma, scale);
}

}  // namespace excount
