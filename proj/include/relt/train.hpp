#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "relt/embed_io.hpp"
#include "relt/rtm.hpp"

namespace relt {

enum class TrainableSet { anchors_only, rtm_only, all };

const char* to_string(TrainableSet s);
TrainableSet parse_trainable_set(const std::string& s);

struct TrainConfig {
  std::size_t shots = 16;
  std::size_t epochs = 20;
  std::size_t batch_size = 256;  // capped at the support size
  double learning_rate = 1e-5;
  double weight_decay = 0.01;
  double tau = 0.01;             // relation temperature
  double tau_prime = 0.01;
  double attn_temperature = 0.01;
  double alpha = 1.0;
  double gamma = 0.0;            // PP-loss weight
  std::size_t num_anchors = 80;
  std::uint64_t seed = 0;
  TrainableSet trainable_set = TrainableSet::all;
  ProjectionInit projection_init = ProjectionInit::random;
  // "auto" (the bundle's anchors if it has them, else random), "manifest",
  // "random" or "file:PATH". The bundle and file forms set num_anchors.
  std::string anchor_init = "auto";
  std::optional<double> clip_scale;  // defaults to 1 / tau

  double scale() const { return clip_scale.value_or(1.0 / tau); }
  LossConfig loss_config() const { return {tau, scale(), alpha, gamma}; }
  void validate() const;
};

// Profile defaults: "eurosat" trains 100 epochs, everything else 20.
TrainConfig default_train_config(const std::string& profile = "");

// lr for step in [0, total_steps): base_lr * (1 + cos(pi * step / total_steps)) / 2
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);

struct AdamWState {
  RtmParams m;
  RtmParams v;
  std::uint64_t step = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// In-place AdamW update of one tensor; `step` is the 1-based step count.
void adamw_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                  std::span<double> v, std::uint64_t step, double lr, double weight_decay);

AdamWState adamw_init(const RtmParams& params);

// Tensor mask per RtmParams::tensors() order.
std::array<bool, RtmParams::kTensorCount> trainable_mask(TrainableSet s);

void optimizer_step(RtmParams& params, const RtmParams& grads, AdamWState& state, double lr,
                    double weight_decay, TrainableSet trainable = TrainableSet::all);

struct EpochLog {
  std::size_t epoch = 0;
  double mean_ce = 0.0;
  double mean_pp = 0.0;
  double total_loss = 0.0;
  double support_accuracy = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  RtmParams params;
  std::vector<EpochLog> log;
};

TrainResult train_few_shot(const TrainConfig& config, const LabeledImageSet& support,
                           const Matrix& targets, const RtmParams& init);

// Picks `shots` examples per class (seeded, ascending index order within the
// result). Throws if some class has fewer than `shots` examples.
std::vector<std::size_t> sample_few_shot(std::span<const std::uint32_t> labels,
                                         std::size_t class_count, std::size_t shots,
                                         std::uint64_t seed);

LabeledImageSet subset(const LabeledImageSet& set, std::span<const std::size_t> indices);

// Fused-logit accuracy of a parameter set over a labeled set.
double fused_accuracy(const LabeledImageSet& set, const RtmParams& params, const Matrix& targets,
                      const LossConfig& config);

struct SupportProvenance {
  std::string source;  // "images" or "support"
  std::vector<std::size_t> indices;
};

void write_train_log(const std::vector<EpochLog>& log, const std::filesystem::path& path);

// Checkpoint directory = params (rtm format) + train_config.json + train_log.csv.
void save_checkpoint(const std::filesystem::path& dir, const TrainResult& result,
                     const TrainConfig& config, const SupportProvenance& provenance);

struct LoadedCheckpoint {
  RtmParams params;
  CheckpointMeta meta;
  double alpha = 1.0;
  double clip_scale = 100.0;
  std::optional<SupportProvenance> provenance;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

struct FewShotRun {
  TrainConfig config;  // anchor_init and num_anchors resolved
  SupportProvenance provenance;
  TrainResult result;
};

inline constexpr std::array<double, 5> kAlphaGrid = {0.25, 0.5, 1.0, 2.0, 4.0};

struct AlphaSearch {
  double alpha = 1.0;
  std::vector<double> accuracies;  // one per grid entry
};

// Fused accuracy on a held-out set for each alpha in the grid. The best one
// wins; ties go to the value closest to 1 on a log scale.
AlphaSearch select_alpha(const LabeledImageSet& validation, const RtmParams& params,
                         const Matrix& targets, LossConfig config,
                         std::span<const double> grid = kAlphaGrid);

// Full training path: sample shots from the support set (or the image set
// when the bundle has none), initialize parameters, train.
FewShotRun train_from_bundle(const ValidatedBundle& bundle, TrainConfig config);

}  // namespace relt
