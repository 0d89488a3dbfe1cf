#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "relt/embed_io.hpp"
#include "relt/matrix.hpp"
#include "relt/relation.hpp"

namespace relt {

enum class Branch { consistency, total_prob, image_image, rtm };

const char* branch_name(Branch b);
Branch parse_branch(const std::string& name);

// Score vectors for one image. fused == clip + sum_b alpha_b * branch_b.
struct PredictionBundle {
  Vector clip_scores;
  std::map<Branch, Vector> branch_scores;
  std::map<Branch, double> alphas;
  Vector fused;
};

enum class ScoreMode { logits, probabilities };

// scale * dot(image, target_i), or its softmax in probability mode.
Vector clip_scores(std::span<const double> image, const Matrix& targets, double scale,
                   ScoreMode mode = ScoreMode::logits);

// Softmax over targets of cos(p_anc, R_i) / tau_prime.
Vector consistency_transition(std::span<const double> p_anc, const RelationMatrix& r,
                              double tau_prime);

// R * p_anc with R column-stochastic.
Vector total_probability_transition(std::span<const double> p_anc, const RelationMatrix& r);

// Attention over training images (softmax of cos / tau) applied to one-hot labels.
Vector image_image_transition(std::span<const double> image, const Matrix& train_features,
                              std::span<const std::uint32_t> labels, std::size_t class_count,
                              double tau);

PredictionBundle fuse(Vector clip, std::map<Branch, Vector> branches,
                      const std::map<Branch, double>& alphas);

struct ZeroShotConfig {
  double tau = 0.01;
  double tau_prime = 0.01;
  // Defaults to 1 / tau when unset.
  std::optional<double> clip_scale;
  std::set<Branch> variants;
  std::map<Branch, double> alphas;
  double default_alpha = 1.0;

  double scale() const { return clip_scale.value_or(1.0 / tau); }
  double alpha_for(Branch b) const;
};

// Everything that depends only on the class side; built once per run.
struct ZeroShotContext {
  Matrix targets;
  Matrix anchors;
  std::optional<RelationSet> relations;
  Matrix support_features;
  std::vector<std::uint32_t> support_labels;
};

ZeroShotContext prepare_zero_shot(const Matrix& targets, const std::optional<Matrix>& anchors,
                                  const std::optional<LabeledImageSet>& support,
                                  const ZeroShotConfig& config);

PredictionBundle zero_shot_predict(std::span<const double> image, const ZeroShotContext& ctx,
                                   const ZeroShotConfig& config);

// Convenience form; rebuilds the relation matrices on each call.
PredictionBundle zero_shot_predict(std::span<const double> image, const Matrix& targets,
                                   const Matrix& anchors, const ZeroShotConfig& config);

// Lowest index wins ties.
std::size_t argmax(std::span<const double> v);

}  // namespace relt
