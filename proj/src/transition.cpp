#include "relt/transition.hpp"

#include <cmath>

#include "relt/error.hpp"

namespace relt {

const char* branch_name(Branch b) {
  switch (b) {
    case Branch::consistency: return "consistency";
    case Branch::total_prob: return "total-prob";
    case Branch::image_image: return "image-image";
    case Branch::rtm: return "rtm";
  }
  return "?";
}

Branch parse_branch(const std::string& name) {
  if (name == "consistency") return Branch::consistency;
  if (name == "total-prob") return Branch::total_prob;
  if (name == "image-image") return Branch::image_image;
  if (name == "rtm") return Branch::rtm;
  throw Error(Errc::invalid_argument, "unknown branch '" + name + "'");
}

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

Vector clip_scores(std::span<const double> image, const Matrix& targets, double scale,
                   ScoreMode mode) {
  if (image.size() != targets.cols()) {
    throw Error(Errc::dimension_mismatch, "clip_scores: dimension mismatch");
  }
  if (!(scale > 0.0)) throw Error(Errc::invalid_argument, "clip_scores: scale must be positive");
  Vector s(targets.rows());
  for (std::size_t i = 0; i < targets.rows(); ++i) s[i] = scale * dot(image, targets.row(i));
  if (mode == ScoreMode::probabilities) return softmax(s, 1.0);
  return s;
}

Vector consistency_transition(std::span<const double> p_anc, const RelationMatrix& r,
                              double tau_prime) {
  if (p_anc.size() != r.anchors()) {
    throw Error(Errc::dimension_mismatch, "consistency_transition: p_anc length " +
                                              std::to_string(p_anc.size()) + " != C_anc " +
                                              std::to_string(r.anchors()));
  }
  const double p_norm = std::sqrt(dot(p_anc, p_anc));
  if (p_norm == 0.0) throw Error(Errc::zero_norm, "consistency_transition: zero-norm p_anc");
  Vector cos(r.targets());
  for (std::size_t i = 0; i < r.targets(); ++i) {
    const auto row = r.values.row(i);
    const double row_norm = std::sqrt(dot(row, row));
    if (row_norm == 0.0) {
      throw Error(Errc::zero_norm, "consistency_transition: zero-norm relation row " +
                                       std::to_string(i));
    }
    cos[i] = dot(p_anc, row) / (p_norm * row_norm);
  }
  return softmax(cos, tau_prime);
}

Vector total_probability_transition(std::span<const double> p_anc, const RelationMatrix& r) {
  if (r.normalization != Normalization::over_targets) {
    throw Error(Errc::wrong_normalization,
                "total_probability_transition needs an over_targets (column-stochastic) matrix");
  }
  if (p_anc.size() != r.anchors()) {
    throw Error(Errc::dimension_mismatch, "total_probability_transition: p_anc length mismatch");
  }
  return matvec(r.values, p_anc);
}

Vector image_image_transition(std::span<const double> image, const Matrix& train_features,
                              std::span<const std::uint32_t> labels, std::size_t class_count,
                              double tau) {
  if (train_features.rows() == 0) {
    throw Error(Errc::invalid_argument, "image_image_transition: empty training set");
  }
  if (labels.size() != train_features.rows()) {
    throw Error(Errc::dimension_mismatch, "image_image_transition: labels length mismatch");
  }
  const Vector attention = image_anchor_relation(image, train_features, tau);
  Vector out(class_count, 0.0);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] >= class_count) {
      throw Error(Errc::label_out_of_range, "image_image_transition: label out of range");
    }
    out[labels[n]] += attention[n];
  }
  return out;
}

PredictionBundle fuse(Vector clip, std::map<Branch, Vector> branches,
                      const std::map<Branch, double>& alphas) {
  PredictionBundle b;
  b.fused = clip;
  for (const auto& [branch, scores] : branches) {
    if (scores.size() != clip.size()) {
      throw Error(Errc::dimension_mismatch,
                  std::string("fuse: branch ") + branch_name(branch) + " length mismatch");
    }
    const auto it = alphas.find(branch);
    if (it == alphas.end()) {
      throw Error(Errc::invalid_argument,
                  std::string("fuse: missing alpha for branch ") + branch_name(branch));
    }
    if (!(it->second >= 0.0)) {
      throw Error(Errc::invalid_argument, "fuse: alpha must be nonnegative");
    }
    for (std::size_t i = 0; i < clip.size(); ++i) b.fused[i] += it->second * scores[i];
    b.alphas[branch] = it->second;
  }
  b.clip_scores = std::move(clip);
  b.branch_scores = std::move(branches);
  return b;
}

double ZeroShotConfig::alpha_for(Branch b) const {
  const auto it = alphas.find(b);
  return it == alphas.end() ? default_alpha : it->second;
}

ZeroShotContext prepare_zero_shot(const Matrix& targets, const std::optional<Matrix>& anchors,
                                  const std::optional<LabeledImageSet>& support,
                                  const ZeroShotConfig& config) {
  ZeroShotContext ctx;
  ctx.targets = targets;
  const bool needs_anchors =
      config.variants.contains(Branch::consistency) || config.variants.contains(Branch::total_prob);
  if (needs_anchors) {
    if (!anchors) {
      throw Error(Errc::invalid_argument, "consistency/total-prob variants need anchor features");
    }
    ctx.anchors = *anchors;
    ctx.relations = build_relation_set(targets, *anchors, config.tau);
  }
  if (config.variants.contains(Branch::image_image)) {
    if (!support || support->size() == 0) {
      throw Error(Errc::invalid_argument,
                  "image-image variant needs a labeled support set (support_images/support_labels)");
    }
    ctx.support_features = support->features.to_matrix();
    ctx.support_labels = support->labels;
  }
  if (config.variants.contains(Branch::rtm)) {
    throw Error(Errc::invalid_argument, "the rtm branch needs a trained checkpoint");
  }
  return ctx;
}

PredictionBundle zero_shot_predict(std::span<const double> image, const ZeroShotContext& ctx,
                                   const ZeroShotConfig& config) {
  Vector clip = clip_scores(image, ctx.targets, config.scale(), ScoreMode::probabilities);
  std::map<Branch, Vector> branches;
  std::map<Branch, double> alphas;
  if (ctx.relations) {
    const Vector p_anc = image_anchor_relation(image, ctx.anchors, config.tau);
    if (config.variants.contains(Branch::consistency)) {
      branches[Branch::consistency] =
          consistency_transition(p_anc, ctx.relations->over_anchors, config.tau_prime);
    }
    if (config.variants.contains(Branch::total_prob)) {
      branches[Branch::total_prob] =
          total_probability_transition(p_anc, ctx.relations->over_targets);
    }
  }
  if (config.variants.contains(Branch::image_image)) {
    branches[Branch::image_image] = image_image_transition(
        image, ctx.support_features, ctx.support_labels, ctx.targets.rows(), config.tau);
  }
  for (const auto& [b, _] : branches) alphas[b] = config.alpha_for(b);
  return fuse(std::move(clip), std::move(branches), alphas);
}

PredictionBundle zero_shot_predict(std::span<const double> image, const Matrix& targets,
                                   const Matrix& anchors, const ZeroShotConfig& config) {
  const auto ctx = prepare_zero_shot(targets, anchors, std::nullopt, config);
  return zero_shot_predict(image, ctx, config);
}

}  // namespace relt
