#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "relt/embed_io.hpp"
#include "relt/losses.hpp"
#include "relt/train.hpp"
#include "relt/transition.hpp"

namespace relt {

// Fraction of rows whose argmax (lowest index on ties) equals the label.
double top1_accuracy(const std::vector<Vector>& predictions, std::span<const std::uint32_t> labels);

struct PredictionRecord {
  std::size_t image_index = 0;
  std::size_t clip_argmax = 0;
  std::size_t fused_argmax = 0;
  std::map<std::string, std::size_t> per_branch_argmax;
  Vector fused_scores;
};

struct EvalReport {
  double top1_accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  // "clip", each active branch alone, and "fused".
  std::map<std::string, double> branch_accuracies;
  std::optional<double> marginal_balance;
  std::size_t sample_count = 0;
  std::size_t correct = 0;
  std::string mode;
};

struct EvalResult {
  EvalReport report;
  std::vector<PredictionRecord> predictions;
  std::uint64_t relation_builds = 0;  // constructions during this run
};

// Zero-shot path over the bundle's image set.
EvalResult evaluate_zero_shot(const ValidatedBundle& bundle, const ZeroShotConfig& config);

// Trained path: fused logits = scale * (cos + alpha * rtm). Images listed in
// `exclude` (the training shots) are skipped.
EvalResult evaluate_checkpoint(const ValidatedBundle& bundle, const LoadedCheckpoint& checkpoint,
                               const std::vector<std::size_t>& exclude = {});

// Stable key order; byte-identical for identical inputs.
std::string report_json(const EvalReport& report);
std::string prediction_json(const PredictionRecord& record);
void write_report(const EvalReport& report, const std::filesystem::path& path);
void write_predictions(const std::vector<PredictionRecord>& predictions,
                       const std::filesystem::path& path);

struct InspectReport {
  RelationSet relations;
  double marginal_balance = 0.0;
  std::vector<std::size_t> top_cluster_sizes;   // per anchor column (over_targets)
  std::vector<double> column_entropy;           // normalized to [0, 1]
  std::vector<std::size_t> one_hot_anchors;     // top cluster of size 1
  std::vector<std::size_t> uniform_anchors;     // normalized entropy >= kUniformEntropy
  std::vector<std::size_t> weak_targets;        // marginal < kWeakTargetFraction / C_tar
};

inline constexpr double kUniformEntropy = 0.95;
inline constexpr double kWeakTargetFraction = 0.1;

InspectReport inspect_relations(const Matrix& targets, const Matrix& anchors, double tau);
std::string inspect_json(const InspectReport& report);

}  // namespace relt
