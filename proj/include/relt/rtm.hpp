#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>

#include "relt/embed_io.hpp"
#include "relt/losses.hpp"
#include "relt/matrix.hpp"
#include "relt/relation.hpp"

namespace relt {

inline constexpr std::size_t kFfnExpansion = 4;
inline constexpr double kLayerNormEps = 1e-5;

// Parameters of the relation transition block: one cross-attention head
// (image query, anchor keys, relation-matrix values) followed by a pre-norm
// ReLU feed-forward layer with a residual on the C_tar-dimensional output.
// Biases and LayerNorm vectors are stored as 1 x n matrices.
struct RtmParams {
  Matrix anchors;  // C_anc x D, raw; normalized inside the forward
  Matrix w_q;      // D x D
  Matrix w_k;      // D x D
  Matrix ffn_w1;   // C_tar x H
  Matrix ffn_b1;   // 1 x H
  Matrix ffn_w2;   // H x C_tar
  Matrix ffn_b2;   // 1 x C_tar
  Matrix ln_gain;  // 1 x C_tar
  Matrix ln_bias;  // 1 x C_tar
  double attn_temperature = 0.01;

  std::size_t c_tar() const { return ln_gain.cols(); }
  std::size_t c_anc() const { return anchors.rows(); }
  std::size_t dim() const { return anchors.cols(); }
  std::size_t hidden() const { return ffn_b1.cols(); }

  static constexpr std::size_t kTensorCount = 9;
  static constexpr std::array<const char*, kTensorCount> kTensorNames = {
      "anchors", "w_q", "w_k", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln_gain", "ln_bias"};
  std::array<Matrix*, kTensorCount> tensors();
  std::array<const Matrix*, kTensorCount> tensors() const;

  // Same shapes, all zeros (for gradients and optimizer moments).
  RtmParams zeros_like() const;
  std::size_t parameter_count() const;

  friend bool operator==(const RtmParams&, const RtmParams&) = default;
};

enum class ProjectionInit { identity, random };
enum class AnchorInitKind { from_features, random };

struct AnchorInit {
  AnchorInitKind kind = AnchorInitKind::random;
  std::optional<Matrix> features;  // for from_features
};

// identity: w_q = w_k = I, FFN weights and biases zero, LayerNorm gain 1 / bias 0.
// random: w_q, w_k = I + 0.01 N(0,1); ffn_w1 ~ N(0, 1/C_tar); everything that
// feeds the residual (ffn_w2, biases) stays zero so the block still starts on
// the training-free path. Random anchors are unit-Gaussian rows.
RtmParams rtm_init(std::size_t c_tar, std::size_t c_anc, std::size_t dim, ProjectionInit mode,
                   const AnchorInit& anchor_init, std::uint64_t seed,
                   double attn_temperature = 0.01);

// Class-side state of the forward pass: normalized anchors, relation matrix
// and projected keys. Built once, reused for every image.
struct RtmContext {
  Matrix anchors_unit;  // C_anc x D
  Vector anchor_norms;  // C_anc
  RelationSet relations;  // both normalizations, C_tar x C_anc, one build
  Matrix keys;          // C_anc x D, anchors_unit * w_k
};

RtmContext rtm_prepare(const RtmParams& params, const Matrix& targets, double tau_rel);

// Output of the block for one image (length C_tar).
Vector rtm_forward(std::span<const double> image, const RtmParams& params,
                   const RtmContext& ctx);
Vector rtm_forward(std::span<const double> image, const RtmParams& params,
                   const Matrix& targets, double tau_rel);

struct LossConfig {
  double tau_rel = 0.01;     // relation-matrix temperature
  double clip_scale = 100.0; // logit scale for the fused logits
  double alpha = 1.0;
  double gamma = 0.0;        // PP-loss weight
};

// clip_scale * (dot(image, target_i) + alpha * rtm_out_i)
Vector fused_logits(std::span<const double> image, const Matrix& targets,
                    std::span<const double> rtm_out, const LossConfig& config);

struct GradientResult {
  RtmParams grad;      // same shapes as the parameters
  double loss = 0.0;   // mean_ce + gamma * pp.total
  double mean_ce = 0.0;
  PpLossReport pp;     // zeros when gamma == 0
  std::size_t correct = 0;  // fused argmax hits in the batch
};

// Exact gradient of mean cross-entropy over the batch plus gamma * PP loss.
// Per-sample contributions are reduced in index order.
GradientResult rtm_gradients(const LabeledImageSet& batch, const RtmParams& params,
                             const Matrix& targets, const LossConfig& config);
// Batch given as feature rows plus labels (avoids float round-trips in tests).
GradientResult rtm_gradients(const Matrix& features, std::span<const std::uint32_t> labels,
                             const RtmParams& params, const Matrix& targets,
                             const LossConfig& config);

// Loss only, same definition as rtm_gradients (for finite differences).
double rtm_loss(const Matrix& features, std::span<const std::uint32_t> labels,
                const RtmParams& params, const Matrix& targets, const LossConfig& config);

// Discrete state the loss is piecewise-smooth in: each sample's ReLU
// activity and, when gamma > 0, each column's PP branch and top-3 picks.
// Two parameter settings with equal patterns lie on the same smooth piece.
std::vector<std::uint8_t> rtm_active_pattern(const Matrix& features, const RtmParams& params,
                                             const Matrix& targets, const LossConfig& config);

struct CheckpointMeta {
  double tau_rel = 0.01;
  std::string init_mode = "identity";
  std::string anchor_init = "random";
  std::uint64_t seed = 0;
};

// One RTEB file per tensor plus params.json.
void save_params(const RtmParams& params, const CheckpointMeta& meta,
                 const std::filesystem::path& dir);
RtmParams load_params(const std::filesystem::path& dir, CheckpointMeta* meta = nullptr);

}  // namespace relt
