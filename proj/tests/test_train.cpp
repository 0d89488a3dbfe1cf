#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <utility>

#include "oracles.hpp"
#include "relt/error.hpp"
#include "relt/synthetic.hpp"
#include "relt/train.hpp"

using namespace relt;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Fixture {
  SyntheticDataset ds;
  Matrix targets;
  RtmParams init;
};

Fixture small_problem(std::uint64_t seed = 0) {
  SyntheticConfig sc;
  sc.seed = seed;
  sc.shots = 4;
  sc.test_per_class = 5;
  Fixture f{make_synthetic(sc), {}, {}};
  f.targets = f.ds.targets.to_matrix();
  f.init = rtm_init(4, sc.num_anchors, sc.dim, ProjectionInit::random,
                    {AnchorInitKind::from_features, f.ds.anchors.to_matrix()}, seed);
  return f;
}

TrainConfig quick_config() {
  TrainConfig c = default_train_config("synthetic");
  c.epochs = 3;
  c.batch_size = 5;
  return c;
}

}  // namespace

TEST(CosineLr, Schedule) {
  EXPECT_EQ(cosine_lr(0, 10, 0.5), 0.5);
  EXPECT_NEAR(cosine_lr(5, 10, 0.5), 0.25, 1e-16);
  EXPECT_NEAR(cosine_lr(9, 10, 1.0), 0.5 * (1 + std::cos(0.9 * std::numbers::pi)), 1e-16);
  EXPECT_THROW(cosine_lr(10, 10, 0.5), Error);
  EXPECT_THROW(cosine_lr(0, 0, 0.5), Error);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  Vector p{0.0}, g{1.0}, m{0.0}, v{0.0};
  adamw_update(p, g, m, v, 1, 0.1, 0.0);
  EXPECT_NEAR(p[0], -0.1, 1e-8);
  EXPECT_NEAR(m[0], 0.1, 1e-16);
  EXPECT_NEAR(v[0], 0.001, 1e-16);
}

TEST(AdamW, ZeroGradientWithoutDecayIsANoOp) {
  Vector p{1.5, -2.0}, g{0.0, 0.0}, m{0.0, 0.0}, v{0.0, 0.0};
  adamw_update(p, g, m, v, 1, 0.1, 0.0);
  EXPECT_EQ(p, (Vector{1.5, -2.0}));
}

TEST(AdamW, DecayIsDecoupled) {
  Vector p{2.0, -4.0}, g{0.0, 0.0}, m{0.0, 0.0}, v{0.0, 0.0};
  adamw_update(p, g, m, v, 1, 0.1, 0.01);
  EXPECT_NEAR(p[0], 2.0 - 0.1 * 0.01 * 2.0, 1e-15);
  EXPECT_NEAR(p[1], -4.0 + 0.1 * 0.01 * 4.0, 1e-15);
}

TEST(AdamW, Errors) {
  Vector p{0.0, 0.0}, g{1.0}, m{0.0, 0.0}, v{0.0, 0.0};
  EXPECT_THROW(adamw_update(p, g, m, v, 1, 0.1, 0.0), Error);
  Vector g2{1.0, 1.0};
  EXPECT_THROW(adamw_update(p, g2, m, v, 0, 0.1, 0.0), Error);
  RtmParams a = rtm_init(2, 2, 3, ProjectionInit::identity, AnchorInit{}, 0);
  RtmParams b = rtm_init(2, 3, 3, ProjectionInit::identity, AnchorInit{}, 0);
  AdamWState s = adamw_init(a);
  EXPECT_THROW(optimizer_step(a, b, s, 0.1, 0.0), Error);
}

TEST(AdamW, TrainableMask) {
  const auto anchors = trainable_mask(TrainableSet::anchors_only);
  const auto rtm = trainable_mask(TrainableSet::rtm_only);
  EXPECT_TRUE(anchors[0]);
  EXPECT_FALSE(rtm[0]);
  for (std::size_t t = 1; t < RtmParams::kTensorCount; ++t) {
    EXPECT_FALSE(anchors[t]);
    EXPECT_TRUE(rtm[t]);
  }
  EXPECT_EQ(parse_trainable_set("anchors_only"), TrainableSet::anchors_only);
  EXPECT_THROW(parse_trainable_set("bogus"), Error);
}

TEST(Train, ZeroEpochsReturnsInit) {
  Fixture f = small_problem();
  TrainConfig c = quick_config();
  c.epochs = 0;
  const auto r = train_few_shot(c, f.ds.support, f.targets, f.init);
  EXPECT_EQ(r.params, f.init);
  EXPECT_TRUE(r.log.empty());
}

TEST(Train, AnchorsOnlyLeavesTheRestUntouched) {
  Fixture f = small_problem();
  TrainConfig c = quick_config();
  c.trainable_set = TrainableSet::anchors_only;
  const auto r = train_few_shot(c, f.ds.support, f.targets, f.init);
  EXPECT_NE(r.params.anchors, f.init.anchors);
  const auto a = std::as_const(r.params).tensors();
  const auto b = f.init.tensors();
  for (std::size_t t = 1; t < RtmParams::kTensorCount; ++t) EXPECT_EQ(*a[t], *b[t]) << RtmParams::kTensorNames[t];

  c.trainable_set = TrainableSet::rtm_only;
  EXPECT_EQ(train_few_shot(c, f.ds.support, f.targets, f.init).params.anchors, f.init.anchors);
}

TEST(Train, DeterministicForAFixedSeed) {
  Fixture f = small_problem();
  TrainConfig c = quick_config();
  c.gamma = 0.5;
  const auto a = train_few_shot(c, f.ds.support, f.targets, f.init);
  const auto b = train_few_shot(c, f.ds.support, f.targets, f.init);
  EXPECT_EQ(a.params, b.params);
  c.seed = 1;
  EXPECT_NE(train_few_shot(c, f.ds.support, f.targets, f.init).params, a.params);
}

TEST(Train, LogDecomposesTheLoss) {
  Fixture f = small_problem();
  TrainConfig c = quick_config();
  c.gamma = 0.25;
  const auto r = train_few_shot(c, f.ds.support, f.targets, f.init);
  ASSERT_EQ(r.log.size(), 3u);
  for (std::size_t e = 0; e < r.log.size(); ++e) {
    const auto& entry = r.log[e];
    EXPECT_EQ(entry.epoch, e + 1);
    EXPECT_NEAR(entry.total_loss, entry.mean_ce + c.gamma * entry.mean_pp, 1e-15);
    EXPECT_GE(entry.support_accuracy, 0.0);
    EXPECT_LE(entry.support_accuracy, 1.0);
  }
  EXPECT_EQ(r.log[0].lr, c.learning_rate);
}

TEST(Train, SingleFullBatchEpochMatchesOneOptimizerStep) {
  // With one batch per epoch, epoch one is exactly one AdamW step from init.
  Fixture f = small_problem();
  TrainConfig c = quick_config();
  c.epochs = 1;
  c.batch_size = 1000;
  const auto r = train_few_shot(c, f.ds.support, f.targets, f.init);
  const auto g = rtm_gradients(f.ds.support, f.init, f.targets, c.loss_config());
  RtmParams want = f.init;
  AdamWState s = adamw_init(want);
  optimizer_step(want, g.grad, s, c.learning_rate, c.weight_decay);
  const auto a = r.params.tensors();
  const auto b = std::as_const(want).tensors();
  for (std::size_t t = 0; t < RtmParams::kTensorCount; ++t)
    for (std::size_t i = 0; i < a[t]->size(); ++i)
      EXPECT_NEAR(a[t]->data()[i], b[t]->data()[i], 1e-13) << RtmParams::kTensorNames[t];
  EXPECT_NEAR(r.log[0].mean_ce, g.mean_ce, 1e-12);
}

TEST(Train, ConfigValidation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  for (auto mutate : std::vector<void (*)(TrainConfig&)>{
           [](TrainConfig& x) { x.learning_rate = 0; }, [](TrainConfig& x) { x.tau = -1; },
           [](TrainConfig& x) { x.gamma = -0.1; }, [](TrainConfig& x) { x.batch_size = 0; },
           [](TrainConfig& x) { x.shots = 0; }, [](TrainConfig& x) { x.weight_decay = NAN; }}) {
    TrainConfig bad;
    mutate(bad);
    EXPECT_THROW(bad.validate(), Error);
  }
  EXPECT_EQ(default_train_config("eurosat").epochs, 100u);
  EXPECT_EQ(default_train_config().epochs, 20u);
  EXPECT_NEAR(default_train_config("synthetic").learning_rate, 1e-3, 1e-18);
  EXPECT_THROW(default_train_config("imagenet21k"), Error);
  EXPECT_EQ(TrainConfig{}.scale(), 100.0);
}

TEST(FewShot, SamplesPerClassDeterministically) {
  std::vector<std::uint32_t> labels;
  for (std::uint32_t i = 0; i < 60; ++i) labels.push_back(i % 3);
  const auto a = sample_few_shot(labels, 3, 5, 11);
  EXPECT_EQ(a, sample_few_shot(labels, 3, 5, 11));
  EXPECT_NE(a, sample_few_shot(labels, 3, 5, 12));
  ASSERT_EQ(a.size(), 15u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  std::vector<int> per(3, 0);
  for (std::size_t i : a) ++per[labels[i]];
  EXPECT_EQ(per, (std::vector<int>{5, 5, 5}));
  EXPECT_THROW(sample_few_shot(labels, 3, 21, 0), Error);
  EXPECT_THROW(sample_few_shot(labels, 2, 1, 0), Error);
}

TEST(Checkpoint, RoundTripAndBitIdenticalReruns) {
  const fs::path root = fs::temp_directory_path() / "relt_train_ckpt";
  fs::remove_all(root);
  SyntheticConfig sc;
  sc.shots = 4;
  sc.test_per_class = 5;
  const auto manifest = write_synthetic(make_synthetic(sc), root / "data");
  const ValidatedBundle bundle = validate_manifest(load_manifest(manifest));
  TrainConfig c = quick_config();
  c.shots = 3;
  const FewShotRun a = train_from_bundle(bundle, c);
  const FewShotRun b = train_from_bundle(bundle, c);
  EXPECT_EQ(a.config.anchor_init, "manifest");
  EXPECT_EQ(a.config.num_anchors, sc.num_anchors);
  EXPECT_EQ(a.provenance.source, "support");
  EXPECT_EQ(a.provenance.indices.size(), 12u);
  save_checkpoint(root / "a", a.result, a.config, a.provenance);
  save_checkpoint(root / "b", b.result, b.config, b.provenance);
  for (const auto& entry : fs::directory_iterator(root / "a")) {
    EXPECT_EQ(slurp(entry.path()), slurp(root / "b" / entry.path().filename())) << entry.path();
  }
  const LoadedCheckpoint loaded = load_checkpoint(root / "a");
  EXPECT_EQ(loaded.alpha, c.alpha);
  EXPECT_EQ(loaded.clip_scale, 100.0);
  ASSERT_TRUE(loaded.provenance.has_value());
  EXPECT_EQ(loaded.provenance->indices, a.provenance.indices);

  TrainConfig r = c;
  r.anchor_init = "random";
  r.num_anchors = 5;
  EXPECT_EQ(train_from_bundle(bundle, r).result.params.c_anc(), 5u);
  r.anchor_init = "file:" + (root / "data" / "anchors.rteb").string();
  // Same vectors as the manifest's anchors, so the run is the same.
  EXPECT_EQ(train_from_bundle(bundle, r).result.params, a.result.params);
  r.anchor_init = "nonsense";
  EXPECT_THROW(train_from_bundle(bundle, r), Error);
  fs::remove_all(root);
}

TEST(AlphaSearch, PicksBestAndBreaksTiesTowardOne) {
  Fixture f = small_problem();
  const LossConfig cfg = quick_config().loss_config();
  const AlphaSearch s = select_alpha(f.ds.test, f.init, f.targets, cfg);
  ASSERT_EQ(s.accuracies.size(), kAlphaGrid.size());
  for (std::size_t i = 0; i < kAlphaGrid.size(); ++i) {
    LossConfig c = cfg;
    c.alpha = kAlphaGrid[i];
    EXPECT_EQ(s.accuracies[i], fused_accuracy(f.ds.test, f.init, f.targets, c));
  }
  EXPECT_EQ(*std::max_element(s.accuracies.begin(), s.accuracies.end()),
            s.accuracies[std::find(kAlphaGrid.begin(), kAlphaGrid.end(), s.alpha) - kAlphaGrid.begin()]);
  // A one-class problem is solved at every alpha, so the tie rule decides.
  const std::vector<double> grid{4.0, 0.5, 2.0};
  LabeledImageSet one = subset(f.ds.test, std::vector<std::size_t>{0});
  const AlphaSearch tie = select_alpha(one, f.init, f.targets, cfg, grid);
  EXPECT_EQ(tie.accuracies, (std::vector<double>{1.0, 1.0, 1.0}));
  EXPECT_EQ(tie.alpha, 0.5);
  EXPECT_THROW(select_alpha(one, f.init, f.targets, cfg, std::vector<double>{}), Error);
}
