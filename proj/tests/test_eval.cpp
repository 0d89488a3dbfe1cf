#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "oracles.hpp"
#include "relt/error.hpp"
#include "relt/eval.hpp"
#include "relt/synthetic.hpp"

using namespace relt;
namespace fs = std::filesystem;

namespace {

class EvalTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "relt_eval_test";
    fs::remove_all(root_);
    SyntheticConfig sc;
    sc.test_per_class = 25;
    manifest_ = write_synthetic(make_synthetic(sc), root_);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static ValidatedBundle bundle() { return validate_manifest(load_manifest(manifest_)); }

  static ZeroShotConfig all_variants() {
    ZeroShotConfig c;
    c.variants = {Branch::consistency, Branch::total_prob, Branch::image_image};
    return c;
  }

  static inline fs::path root_;
  static inline fs::path manifest_;
};

}  // namespace

TEST(Top1, ExamplesAndTies) {
  const std::vector<Vector> p{{0.1, 0.9}, {0.8, 0.2}, {0.5, 0.5}};
  EXPECT_DOUBLE_EQ(top1_accuracy(p, std::vector<std::uint32_t>{1, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(top1_accuracy(p, std::vector<std::uint32_t>{1, 0, 1}), 2.0 / 3.0);
  EXPECT_THROW(top1_accuracy(p, std::vector<std::uint32_t>{1, 0}), Error);
  EXPECT_THROW(top1_accuracy({}, std::vector<std::uint32_t>{}), Error);
}

TEST_F(EvalTest, WithoutAnchorsFusedEqualsClip) {
  ValidatedBundle b = bundle();
  b.anchors.reset();
  const auto r = evaluate_zero_shot(b, ZeroShotConfig{});
  EXPECT_EQ(r.report.top1_accuracy, r.report.branch_accuracies.at("clip"));
  EXPECT_FALSE(r.report.marginal_balance.has_value());
  EXPECT_EQ(r.relation_builds, 0u);
  // Independent recomputation of the CLIP baseline.
  const Matrix t = b.targets.to_matrix(), x = b.images.features.to_matrix();
  std::size_t hit = 0;
  for (std::size_t n = 0; n < x.rows(); ++n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < t.rows(); ++i)
      if (dot(x.row(n), t.row(i)) > dot(x.row(n), t.row(best))) best = i;
    hit += best == b.images.labels[n];
  }
  EXPECT_DOUBLE_EQ(r.report.top1_accuracy, static_cast<double>(hit) / x.rows());
}

TEST_F(EvalTest, AllVariantsBuildRelationsOnce) {
  const auto r = evaluate_zero_shot(bundle(), all_variants());
  EXPECT_EQ(r.relation_builds, 1u);
  for (const char* name : {"clip", "fused", "consistency", "total-prob", "image-image"}) {
    EXPECT_TRUE(r.report.branch_accuracies.count(name)) << name;
  }
  ASSERT_TRUE(r.report.marginal_balance.has_value());
  EXPECT_GT(*r.report.marginal_balance, 0.0);
  EXPECT_LE(*r.report.marginal_balance, 1.0 + 1e-12);
}

TEST_F(EvalTest, ReportsAreByteDeterministic) {
  const auto a = evaluate_zero_shot(bundle(), all_variants());
  const auto b = evaluate_zero_shot(bundle(), all_variants());
  EXPECT_EQ(report_json(a.report), report_json(b.report));
  ASSERT_EQ(a.predictions.size(), b.predictions.size());
  for (std::size_t i = 0; i < a.predictions.size(); ++i) {
    EXPECT_EQ(prediction_json(a.predictions[i]), prediction_json(b.predictions[i]));
  }
}

TEST_F(EvalTest, ReportAgreesWithWrittenPredictions) {
  const ValidatedBundle b = bundle();
  const auto r = evaluate_zero_shot(b, all_variants());
  const fs::path preds = root_ / "preds.jsonl";
  write_predictions(r.predictions, preds);
  std::ifstream in(preds);
  std::string line;
  std::vector<Vector> scores;
  std::vector<std::uint32_t> labels;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    const std::size_t idx = j.at("image_index").get<std::size_t>();
    scores.push_back(j.at("fused_scores").get<Vector>());
    labels.push_back(b.images.labels[idx]);
    EXPECT_EQ(j.at("fused_argmax").get<std::size_t>(), argmax(scores.back()));
  }
  ASSERT_EQ(scores.size(), b.images.size());
  EXPECT_DOUBLE_EQ(top1_accuracy(scores, labels), r.report.top1_accuracy);
  const auto report = nlohmann::json::parse(report_json(r.report));
  EXPECT_EQ(report.at("top1_accuracy").get<double>(), r.report.top1_accuracy);
}

TEST_F(EvalTest, ZeroAlphaKeepsClipDecision) {
  ZeroShotConfig c = all_variants();
  c.default_alpha = 0.0;
  const auto r = evaluate_zero_shot(bundle(), c);
  for (const auto& p : r.predictions) EXPECT_EQ(p.fused_argmax, p.clip_argmax);
}

TEST_F(EvalTest, CheckpointExclusionSkipsImages) {
  const ValidatedBundle b = bundle();
  LoadedCheckpoint ckpt;
  ckpt.params = rtm_init(b.targets.rows, b.anchors->rows, b.targets.dim, ProjectionInit::identity,
                         {AnchorInitKind::from_features, b.anchors->to_matrix()}, 0);
  const auto full = evaluate_checkpoint(b, ckpt);
  EXPECT_EQ(full.relation_builds, 1u);
  EXPECT_EQ(full.report.sample_count, b.images.size());
  const auto part = evaluate_checkpoint(b, ckpt, {0, 1, 2});
  EXPECT_EQ(part.report.sample_count, b.images.size() - 3);
  EXPECT_EQ(part.predictions.front().image_index, 3u);
}

TEST(Inspect, SelfAnchorsAreOneHot) {
  const Matrix id = Matrix::identity(6);
  const auto rep = inspect_relations(id, id, 0.01);
  EXPECT_EQ(rep.one_hot_anchors.size(), 6u);
  EXPECT_TRUE(rep.uniform_anchors.empty());
  EXPECT_TRUE(rep.weak_targets.empty());
  EXPECT_NEAR(rep.marginal_balance, 1.0, 1e-12);
  EXPECT_EQ(rep.marginal_balance, marginal_balance(rep.relations.over_targets));
}

TEST(Inspect, DistantAnchorsAtHighTemperatureAreUniform) {
  std::mt19937_64 gen(3);
  const Matrix targets = testutil::random_unit_rows(5, 64, gen);
  const Matrix anchors = testutil::random_unit_rows(4, 64, gen);
  const auto rep = inspect_relations(targets, anchors, 10.0);
  EXPECT_EQ(rep.uniform_anchors.size(), 4u);
  for (double h : rep.column_entropy) EXPECT_GT(h, 0.99);
  const auto j = nlohmann::json::parse(inspect_json(rep));
  EXPECT_EQ(j.at("anchors").get<std::size_t>(), 4u);
}
