#include <gtest/gtest.h>

#include <random>
#include <set>

#include "excount/filter.hpp"

using namespace excount;

namespace {

// Embeds a patch as its mean colour: enough for constructed separable data.
class MeanColourBackbone final : public EmbeddingBackbone {
 public:
  int embed_dim() const override { return 3; }
  int input_size() const override { return 8; }
  std::uint64_t fingerprint() const override { return 99; }
  Eigen::VectorXd embed(const Image& p) const override {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(3);
    for (std::size_t i = 0; i < p.pixels.size(); ++i) v(i % 3) += p.pixels[i];
    return v / (p.pixels.size() / 3.0);
  }
};

LabeledPatchSet coloured_set(std::size_t n, std::uint64_t seed, bool shuffle_labels) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.05f);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  LabeledPatchSet set;
  for (std::size_t i = 0; i < n; ++i) {
    const PatchLabel label = i % 2 ? PatchLabel::Multi : PatchLabel::Single;
    Image img(8, 8);
    for (std::size_t k = 0; k < img.pixels.size(); ++k) {
      // Shuffled-label control: features carry no label information.
      img.pixels[k] = shuffle_labels ? u(rng) : (label == PatchLabel::Single ? 0.7f : 0.3f) + noise(rng);
    }
    set.patches.push_back({img, label, i % 10 < 7 ? SplitTag::Train : SplitTag::Eval, "img" + std::to_string(i), "c"});
  }
  if (shuffle_labels) {
    std::vector<PatchLabel> labels;
    for (const auto& p : set.patches) labels.push_back(p.label);
    std::shuffle(labels.begin(), labels.end(), rng);
    for (std::size_t i = 0; i < labels.size(); ++i) set.patches[i].label = labels[i];
  }
  return set;
}

Dataset ten_record_dataset(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.split_images = std::array<int, 3>{4, 3, 3};
  return synthesize_dataset(spec, seed);
}

}  // namespace

TEST(Curation, TenRecordsGiveThirtyAndThirtySplit42To18) {
  const Dataset ds = ten_record_dataset(1);
  ASSERT_EQ(ds.size(), 10u);
  const LabeledPatchSet set = build_training_set(ds, 5);
  EXPECT_EQ(set.count(PatchLabel::Single), 30u);
  EXPECT_EQ(set.count(PatchLabel::Multi), 30u);
  EXPECT_EQ(set.count(SplitTag::Train), 42u);
  EXPECT_EQ(set.count(SplitTag::Eval), 18u);
  EXPECT_EQ(set.skipped_records, 0u);
  for (const auto& p : set.patches) {
    EXPECT_EQ(p.patch.width, 32);
    EXPECT_EQ(p.patch.height, 32);
  }
}

TEST(Curation, EmptyDatasetGivesEmptySet) {
  const LabeledPatchSet set = build_training_set(Dataset{}, 1);
  EXPECT_TRUE(set.patches.empty());
}

TEST(Curation, DeterministicUnderSeed) {
  const Dataset ds = ten_record_dataset(2);
  const auto a = build_training_set(ds, 9), b = build_training_set(ds, 9);
  ASSERT_EQ(a.patches.size(), b.patches.size());
  for (std::size_t i = 0; i < a.patches.size(); ++i) {
    EXPECT_EQ(a.patches[i].patch, b.patches[i].patch);
    EXPECT_EQ(a.patches[i].label, b.patches[i].label);
    EXPECT_EQ(a.patches[i].split, b.patches[i].split);
  }
}

TEST(Curation, RecordsWithoutExemplarsAreSkipped) {
  Dataset ds = ten_record_dataset(3);
  ds.records[0].exemplar_boxes.clear();
  ds.records[4].exemplar_boxes.clear();
  const LabeledPatchSet set = build_training_set(ds, 1);
  EXPECT_EQ(set.skipped_records, 2u);
  EXPECT_EQ(set.count(PatchLabel::Single), 24u);
}

TEST(Curation, BackgroundCropsAreOptIn) {
  const Dataset ds = ten_record_dataset(4);
  CurationConfig cfg;
  cfg.background_crops = 1;
  const auto with = build_training_set(ds, 1, cfg);
  EXPECT_GT(with.count(PatchLabel::Multi), 30u);
  EXPECT_EQ(with.count(PatchLabel::Single), 30u);
}

TEST(Curation, SplitIsDisjoint) {
  const Dataset ds = ten_record_dataset(5);
  const LabeledPatchSet set = build_training_set(ds, 3);
  // Every patch carries exactly one tag; with whole-class assignment no class
  // straddles the two sides.
  if (set.class_disjoint) {
    std::map<std::string, std::set<SplitTag>> tags;
    for (const auto& p : set.patches) tags[p.class_name].insert(p.split);
    for (const auto& [c, t] : tags) EXPECT_EQ(t.size(), 1u) << c;
  }
  EXPECT_EQ(set.count(SplitTag::Train) + set.count(SplitTag::Eval), set.patches.size());
}

TEST(TrainFilter, SeparableEmbeddingsReachFullAccuracy) {
  const MeanColourBackbone bb;
  FilterTrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 60;
  const FilterTrainResult r = train_filter(coloured_set(200, 1, false), bb, cfg);
  EXPECT_EQ(r.eval_accuracy, 1.0);
  EXPECT_EQ(r.train_accuracy, 1.0);
  EXPECT_LT(r.epoch_loss.back(), r.epoch_loss.front());
}

TEST(TrainFilter, ShuffledLabelsStayNearChance) {
  const MeanColourBackbone bb;
  FilterTrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 30;
  double total = 0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    cfg.seed = s;
    total += train_filter(coloured_set(400, 10 + s, true), bb, cfg).eval_accuracy;
  }
  EXPECT_NEAR(total / 5, 0.5, 0.1);
}

TEST(TrainFilter, SingleLabelTrainingSetIsConfigError) {
  LabeledPatchSet set = coloured_set(20, 1, false);
  for (auto& p : set.patches) p.label = PatchLabel::Single;
  EXPECT_THROW(train_filter(set, MeanColourBackbone{}), ConfigError);
}

TEST(TrainFilter, BackboneIsFrozen) {
  const RandomProjectionBackbone bb;
  const Dataset ds = ten_record_dataset(6);
  const LabeledPatchSet set = build_training_set(ds, 1);
  std::vector<Eigen::VectorXd> before;
  for (std::size_t i = 0; i < 8; ++i) before.push_back(bb.embed(set.patches[i].patch));
  FilterTrainConfig cfg;
  cfg.epochs = 5;
  train_filter(set, bb, cfg);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(bb.embed(set.patches[i].patch), before[i]);
}

TEST(Classify, ProbabilitiesSumToOneAndStateless) {
  const MeanColourBackbone bb;
  FilterTrainConfig cfg;
  cfg.epochs = 5;
  const FilterHead head = train_filter(coloured_set(50, 2, false), bb, cfg).head;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0, 1);
  for (int t = 0; t < 50; ++t) {
    Image p(8, 8);
    for (auto& v : p.pixels) v = u(rng);
    const Verdict v = classify(p, bb, head);
    EXPECT_NEAR(v.p_single + v.p_multi, 1.0, 1e-6);
    EXPECT_EQ(v.confidence, std::max(v.p_single, v.p_multi));
    const Verdict again = classify(p, bb, head);
    EXPECT_EQ(v.p_single, again.p_single);
  }
}

TEST(Classify, UntrainedHeadIsUsageError) {
  EXPECT_THROW(classify(Image(8, 8), MeanColourBackbone{}, FilterHead{}), UsageError);
}

TEST(Classify, HeadFromAnotherBackboneIsRejected) {
  const auto bb = std::make_shared<MeanColourBackbone>();
  FilterTrainConfig cfg;
  cfg.epochs = 2;
  const FilterHead head = train_filter(coloured_set(20, 2, false), *bb, cfg).head;
  EXPECT_NO_THROW(TrainedFilter(bb, head));
  EXPECT_THROW(TrainedFilter(std::make_shared<RandomProjectionBackbone>(), head), ConfigError);
}

// Default desk config on the synthetic benchmark: exemplar crops read as
// single, whole images and two-object crops as multi.
TEST(Classify, DeskHeadSeparatesSingleFromMulti) {
  SyntheticSpec spec;
  spec.images_per_class = 20;
  const Dataset ds = synthesize_dataset(spec, 11);
  const auto train = ds.indices(SplitPart::Train);
  const auto test = ds.indices(SplitPart::Test);
  const RandomProjectionBackbone bb;
  const FilterTrainResult r = train_filter(build_training_set(ds, 1, {}, &train), bb);
  EXPECT_GE(r.eval_accuracy, 0.9);
  std::size_t ok = 0, total = 0;
  for (std::size_t i : test) {
    const Box& b = ds.records[i].exemplar_boxes.front();
    ok += classify(crop_resize(ds.images[i], b, 32, 32), bb, r.head).label == PatchLabel::Single;
    ok += classify(resize(ds.images[i], 32, 32), bb, r.head).label == PatchLabel::Multi;
    total += 2;
  }
  EXPECT_GE(double(ok) / total, 0.9);
}

TEST(FilterHeadFile, RoundTripAndCorruption) {
  const RandomProjectionBackbone bb;
  FilterTrainConfig cfg;
  cfg.epochs = 3;
  const FilterHead head = train_filter(build_training_set(ten_record_dataset(7), 1), bb, cfg).head;
  const std::string bytes = write_filter_head(head);
  const FilterHead back = read_filter_head(bytes);
  EXPECT_EQ(write_filter_head(back), bytes);
  EXPECT_EQ(back.backbone_fingerprint, bb.fingerprint());
  EXPECT_THROW(read_filter_head("XFLX" + bytes.substr(4)), FormatError);
  EXPECT_THROW(read_filter_head(bytes.substr(0, bytes.size() - 1)), FormatError);
  EXPECT_THROW(read_filter_head(bytes.substr(0, 10)), FormatError);
  EXPECT_THROW(write_filter_head(FilterHead{}), UsageError);
}
