#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "excount/dataset.hpp"

using namespace excount;
namespace fs = std::filesystem;

namespace {

std::vector<CountingRecord> records_for(int n_classes, int per_class = 2) {
  std::vector<CountingRecord> v;
  for (int c = 0; c < n_classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      CountingRecord r;
      r.image_id = "c" + std::to_string(c) + "_" + std::to_string(i);
      r.class_name = "class" + std::to_string(c);
      r.width = r.height = 8;
      v.push_back(r);
    }
  }
  return v;
}

std::set<std::string> classes_of(const std::vector<CountingRecord>& v) {
  std::set<std::string> s;
  for (const auto& r : v) s.insert(r.class_name);
  return s;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("excount_dataset_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(SplitByClass, TenClassesSixTwoTwo) {
  const auto recs = records_for(10);
  const DatasetSplit s = split_by_class(recs, {6, 2, 2}, 7);
  EXPECT_EQ(s.classes.train.size(), 6u);
  EXPECT_EQ(s.classes.val.size(), 2u);
  EXPECT_EQ(s.classes.test.size(), 2u);
  EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), recs.size());
}

TEST(SplitByClass, PartitionIsDisjointAndComplete) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto recs = records_for(3 + seed % 9);
    const DatasetSplit s = split_by_class(recs, {6, 2, 2}, seed);
    const auto a = classes_of(s.train), b = classes_of(s.val), c = classes_of(s.test);
    for (const auto& x : a) ASSERT_FALSE(b.count(x) || c.count(x));
    for (const auto& x : b) ASSERT_FALSE(c.count(x));
    ASSERT_EQ(a.size() + b.size() + c.size(), 3 + seed % 9);
    ASSERT_FALSE(a.empty() || b.empty() || c.empty());
  }
}

TEST(SplitByClass, DeterministicUnderSeed) {
  const auto recs = records_for(10);
  const auto a = split_by_class(recs, {6, 2, 2}, 99), b = split_by_class(recs, {6, 2, 2}, 99);
  EXPECT_EQ(a.classes.train, b.classes.train);
  EXPECT_EQ(a.classes.val, b.classes.val);
  EXPECT_EQ(a.classes.test, b.classes.test);
}

TEST(SplitByClass, FewerThanThreeClassesIsConfigError) {
  EXPECT_THROW(split_by_class(records_for(2), {6, 2, 2}, 1), ConfigError);
}

TEST(Synthesize, ThreeClassesTenImagesEach) {
  SyntheticSpec spec;
  const Dataset ds = synthesize_dataset(spec, 5);
  ASSERT_EQ(ds.size(), 30u);
  ASSERT_EQ(ds.images.size(), 30u);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& r = ds.records[i];
    EXPECT_GE(r.count(), 3u);
    EXPECT_LE(r.count(), 12u);
    for (const auto& p : r.points) {
      EXPECT_TRUE(p.x >= 0 && p.x < r.width && p.y >= 0 && p.y < r.height);
    }
    // Dots sit at the centres of the record's target-class scene objects.
    const auto& scene = ds.scenes.at(r.image_id);
    EXPECT_EQ(scene.objects_of(r.class_name).size(), r.count());
    EXPECT_EQ(r.exemplar_boxes.size(), std::min<std::size_t>(3, r.count()));
  }
}

TEST(Synthesize, SplitsAreClassDisjoint) {
  SyntheticSpec spec;
  spec.split_images = std::array<int, 3>{30, 10, 10};
  const Dataset ds = synthesize_dataset(spec, 2);
  std::map<SplitPart, std::set<std::string>> cls;
  for (SplitPart p : {SplitPart::Train, SplitPart::Val, SplitPart::Test}) {
    for (std::size_t i : ds.indices(p)) cls[p].insert(ds.records[i].class_name);
  }
  EXPECT_EQ(ds.indices(SplitPart::Train).size(), 30u);
  EXPECT_EQ(ds.indices(SplitPart::Val).size(), 10u);
  EXPECT_EQ(ds.indices(SplitPart::Test).size(), 10u);
  for (const auto& c : cls[SplitPart::Train]) {
    EXPECT_FALSE(cls[SplitPart::Val].count(c));
    EXPECT_FALSE(cls[SplitPart::Test].count(c));
  }
}

TEST(Synthesize, ZeroDistractorRateMeansOnlyTargets) {
  SyntheticSpec spec;
  spec.distractor_rate = 0.0;
  const Dataset ds = synthesize_dataset(spec, 1);
  for (const auto& r : ds.records) {
    for (const auto& o : ds.scenes.at(r.image_id).objects) EXPECT_EQ(o.class_name, r.class_name);
  }
}

TEST(Synthesize, DistractorsOfOtherClassesWhenRequested) {
  SyntheticSpec spec;
  spec.distractor_rate = 0.5;
  const Dataset ds = synthesize_dataset(spec, 1);
  std::size_t distractors = 0;
  for (const auto& r : ds.records) {
    for (const auto& o : ds.scenes.at(r.image_id).objects) {
      if (o.distractor) {
        ++distractors;
        EXPECT_NE(o.class_name, r.class_name);
      }
    }
  }
  EXPECT_GT(distractors, 0u);
}

TEST(Synthesize, SameSeedGivesIdenticalBytes) {
  SyntheticSpec spec;
  spec.distractor_rate = 0.3;
  const Dataset a = synthesize_dataset(spec, 42), b = synthesize_dataset(spec, 42), c = synthesize_dataset(spec, 43);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(encode_ppm(a.images[i]), encode_ppm(b.images[i]));
    any_diff |= encode_ppm(a.images[i]) != encode_ppm(c.images[i]);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Synthesize, InfeasiblePackingIsGenerationError) {
  SyntheticSpec spec;
  spec.image_size = 16;
  spec.radius_min = 3;
  spec.radius_max = 4;
  spec.count_min = 40;
  spec.count_max = 40;
  EXPECT_THROW(synthesize_dataset(spec, 1), GenerationError);
}

TEST(Synthesize, SpecValidation) {
  SyntheticSpec spec;
  spec.classes = {"circle", "square"};
  EXPECT_THROW(synthesize_dataset(spec, 1), ConfigError);
  spec.classes = {"circle", "square", "blob"};
  EXPECT_THROW(synthesize_dataset(spec, 1), ConfigError);
}

TEST(SyntheticSpecJson, RoundTrips) {
  SyntheticSpec spec;
  spec.distractor_rate = 0.75;
  spec.split_images = std::array<int, 3>{3, 4, 5};
  const SyntheticSpec back = nlohmann::json(spec).get<SyntheticSpec>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(spec));
  const auto arr = nlohmann::json::parse(R"({"split_images":[30,10,10]})").get<SyntheticSpec>();
  EXPECT_EQ(*arr.split_images, (std::array<int, 3>{30, 10, 10}));
}

TEST(DatasetFiles, SaveLoadRoundTrip) {
  SyntheticSpec spec;
  spec.images_per_class = 2;
  spec.distractor_rate = 0.5;
  const Dataset ds = synthesize_dataset(spec, 3);
  const fs::path dir = temp_dir("roundtrip");
  save_dataset(ds, dir);
  const Dataset back = load_dataset(dir);
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto j = back.index_of(ds.records[i].image_id);
    ASSERT_TRUE(j);
    const auto& a = ds.records[i];
    const auto& b = back.records[*j];
    EXPECT_EQ(a.class_name, b.class_name);
    ASSERT_EQ(a.points.size(), b.points.size());
    for (std::size_t k = 0; k < a.points.size(); ++k) {
      EXPECT_EQ(a.points[k].x, b.points[k].x);
      EXPECT_EQ(a.points[k].y, b.points[k].y);
    }
    EXPECT_EQ(a.exemplar_boxes, b.exemplar_boxes);
    EXPECT_EQ(encode_ppm(ds.images[i]), encode_ppm(back.images[*j]));
    EXPECT_EQ(back.split_of.at(a.image_id), ds.split_of.at(a.image_id));
    EXPECT_EQ(back.scenes.at(a.image_id).objects.size(), ds.scenes.at(a.image_id).objects.size());
  }
  fs::remove_all(dir);
}

TEST(DatasetFiles, IngestsAnnotationJsonWithSeparateClassMap) {
  const fs::path dir = temp_dir("ingest");
  fs::create_directories(dir / "images");
  write_ppm(dir / "images" / "a.ppm", Image(20, 10, 0.5f));
  write_file_bytes(dir / "annotations.json", R"({"a.jpg": {"image": "images/a.ppm", "points": [[1,2],[15.5,9]],
      "box_examples": [[[0,0],[0,4],[3,4],[3,0]], [5,5,8,9]]}})");
  write_file_bytes(dir / "classes.txt", "a.jpg\tsea shells\n");
  const Dataset ds = load_dataset(dir, dir / "classes.txt");
  ASSERT_EQ(ds.size(), 1u);
  const auto& r = ds.records[0];
  EXPECT_EQ(r.class_name, "sea shells");
  EXPECT_EQ(r.width, 20);
  EXPECT_EQ(r.count(), 2u);
  ASSERT_EQ(r.exemplar_boxes.size(), 2u);
  EXPECT_EQ(r.exemplar_boxes[0], (Box{0, 0, 3, 4}));
  EXPECT_EQ(r.exemplar_boxes[1], (Box{5, 5, 8, 9}));
  EXPECT_TRUE(ds.indices(SplitPart::Train).empty());

  write_file_bytes(dir / "annotations.json", R"({"a.jpg": {"image": "images/a.ppm", "points": [[25,2]]}})");
  EXPECT_THROW(load_dataset(dir, dir / "classes.txt"), FormatError);
  fs::remove_all(dir);
}

TEST(GroundTruth, DensityCountEqualsDots) {
  SyntheticSpec spec;
  const Dataset ds = synthesize_dataset(spec, 8);
  for (const auto& r : ds.records) {
    const DensityMap d = ground_truth_density(r, 4.0, 60.0);
    EXPECT_NEAR(count_from_density(d), double(r.count()), 1e-3 * r.count());
  }
}
