#include "relt/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "relt/error.hpp"
#include "relt/random.hpp"
#include "relt/transition.hpp"

namespace relt {

namespace fs = std::filesystem;

const char* to_string(TrainableSet s) {
  switch (s) {
    case TrainableSet::anchors_only: return "anchors_only";
    case TrainableSet::rtm_only: return "rtm_only";
    case TrainableSet::all: return "all";
  }
  return "all";
}

TrainableSet parse_trainable_set(const std::string& s) {
  if (s == "anchors_only" || s == "anchors") return TrainableSet::anchors_only;
  if (s == "rtm_only" || s == "rtm") return TrainableSet::rtm_only;
  if (s == "all") return TrainableSet::all;
  throw Error(Errc::invalid_argument, "unknown trainable set '" + s + "'");
}

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw Error(Errc::invalid_argument, std::string(name) + " must be positive");
    }
  };
  positive(learning_rate, "learning_rate");
  positive(tau, "tau");
  positive(tau_prime, "tau_prime");
  positive(attn_temperature, "attn_temperature");
  positive(scale(), "clip_scale");
  if (!(weight_decay >= 0.0)) throw Error(Errc::invalid_argument, "weight_decay must be >= 0");
  if (!(alpha >= 0.0)) throw Error(Errc::invalid_argument, "alpha must be >= 0");
  if (!(gamma >= 0.0)) throw Error(Errc::invalid_argument, "gamma must be >= 0");
  if (batch_size == 0) throw Error(Errc::invalid_argument, "batch_size must be positive");
  if (num_anchors == 0) throw Error(Errc::invalid_argument, "num_anchors must be positive");
  if (shots == 0) throw Error(Errc::invalid_argument, "shots must be positive");
}

TrainConfig default_train_config(const std::string& profile) {
  TrainConfig c;
  if (profile == "eurosat") {
    c.epochs = 100;
  } else if (profile == "synthetic") {
    // Low-dimensional toy features need a larger step than CLIP-scale ones.
    c.learning_rate *= 100.0;
  } else if (!profile.empty()) {
    throw Error(Errc::invalid_argument, "unknown profile " + profile);
  }
  return c;
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (step >= total_steps) {
    throw Error(Errc::invalid_argument, "cosine_lr: step " + std::to_string(step) +
                                            " out of range [0, " + std::to_string(total_steps) +
                                            ")");
  }
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                  std::span<double> v, std::uint64_t step, double lr, double weight_decay) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw Error(Errc::dimension_mismatch, "adamw_update: shape mismatch");
  }
  if (step == 0) throw Error(Errc::invalid_argument, "adamw_update: step count starts at 1");
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    param[i] -= lr * weight_decay * param[i];
    m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * grad[i];
    v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * grad[i] * grad[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + kAdamEps);
  }
}

AdamWState adamw_init(const RtmParams& params) {
  return {params.zeros_like(), params.zeros_like(), 0};
}

std::array<bool, RtmParams::kTensorCount> trainable_mask(TrainableSet s) {
  std::array<bool, RtmParams::kTensorCount> mask{};
  mask.fill(s != TrainableSet::anchors_only);
  mask[0] = s != TrainableSet::rtm_only;  // anchors
  return mask;
}

void optimizer_step(RtmParams& params, const RtmParams& grads, AdamWState& state, double lr,
                    double weight_decay, TrainableSet trainable) {
  auto p = params.tensors();
  const auto g = grads.tensors();
  auto m = state.m.tensors();
  auto v = state.v.tensors();
  for (std::size_t t = 0; t < RtmParams::kTensorCount; ++t) {
    if (!p[t]->same_shape(*g[t]) || !p[t]->same_shape(*m[t])) {
      throw Error(Errc::dimension_mismatch, std::string("optimizer_step: shape mismatch in ") +
                                                RtmParams::kTensorNames[t]);
    }
  }
  ++state.step;
  const auto mask = trainable_mask(trainable);
  for (std::size_t t = 0; t < RtmParams::kTensorCount; ++t) {
    if (!mask[t]) continue;
    adamw_update(p[t]->data(), g[t]->data(), m[t]->data(), v[t]->data(), state.step, lr,
                 weight_decay);
  }
}

std::vector<std::size_t> sample_few_shot(std::span<const std::uint32_t> labels,
                                         std::size_t class_count, std::size_t shots,
                                         std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(class_count);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= class_count) {
      throw Error(Errc::label_out_of_range, "sample_few_shot: label out of range");
    }
    by_class[labels[i]].push_back(i);
  }
  Rng rng(seed);
  std::vector<std::size_t> picked;
  for (std::size_t c = 0; c < class_count; ++c) {
    auto& pool = by_class[c];
    if (pool.size() < shots) {
      throw Error(Errc::invalid_argument, "class " + std::to_string(c) + " has " +
                                              std::to_string(pool.size()) + " examples, need " +
                                              std::to_string(shots) + " shots");
    }
    rng.shuffle(pool);
    picked.insert(picked.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(shots));
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

LabeledImageSet subset(const LabeledImageSet& set, std::span<const std::size_t> indices) {
  LabeledImageSet out;
  out.class_count = set.class_count;
  out.features.rows = static_cast<std::uint32_t>(indices.size());
  out.features.dim = set.features.dim;
  out.features.data.reserve(indices.size() * set.features.dim);
  for (std::size_t idx : indices) {
    if (idx >= set.size()) throw Error(Errc::invalid_argument, "subset: index out of range");
    const auto begin = set.features.data.begin() + static_cast<std::ptrdiff_t>(idx * set.features.dim);
    out.features.data.insert(out.features.data.end(), begin, begin + set.features.dim);
    out.labels.push_back(set.labels[idx]);
  }
  out.features.normalized = set.features.normalized;
  return out;
}

double fused_accuracy(const LabeledImageSet& set, const RtmParams& params, const Matrix& targets,
                      const LossConfig& config) {
  if (set.size() == 0) throw Error(Errc::invalid_argument, "fused_accuracy: empty set");
  const RtmContext ctx = rtm_prepare(params, targets, config.tau_rel);
  const Matrix features = set.features.to_matrix();
  std::size_t correct = 0;
  for (std::size_t n = 0; n < set.size(); ++n) {
    const auto image = features.row(n);
    const Vector out = rtm_forward(image, params, ctx);
    if (argmax(fused_logits(image, targets, out, config)) == set.labels[n]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

AlphaSearch select_alpha(const LabeledImageSet& validation, const RtmParams& params,
                         const Matrix& targets, LossConfig config, std::span<const double> grid) {
  if (grid.empty()) throw Error(Errc::invalid_argument, "select_alpha: empty grid");
  AlphaSearch out;
  double best = -1.0;
  for (double a : grid) {
    if (!(a >= 0.0)) throw Error(Errc::invalid_argument, "select_alpha: alpha must be >= 0");
    config.alpha = a;
    const double acc = fused_accuracy(validation, params, targets, config);
    out.accuracies.push_back(acc);
    const bool closer = std::abs(std::log(a)) < std::abs(std::log(out.alpha));
    if (acc > best || (acc == best && closer)) {
      best = acc;
      out.alpha = a;
    }
  }
  return out;
}

TrainResult train_few_shot(const TrainConfig& config, const LabeledImageSet& support,
                           const Matrix& targets, const RtmParams& init) {
  config.validate();
  support.check();
  if (support.size() == 0) throw Error(Errc::invalid_argument, "train: empty support set");
  if (init.c_tar() != targets.rows() || init.dim() != targets.cols()) {
    throw Error(Errc::dimension_mismatch, "train: parameters do not match the target matrix");
  }

  TrainResult result{init, {}};
  const std::size_t n = support.size();
  const std::size_t batch = std::min(config.batch_size, n);
  const std::size_t batches_per_epoch = (n + batch - 1) / batch;
  const std::size_t total_steps = config.epochs * batches_per_epoch;
  const LossConfig loss_cfg = config.loss_config();
  const Matrix features = support.features.to_matrix();

  AdamWState state = adamw_init(init);
  Rng rng(config.seed);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    EpochLog entry;
    entry.epoch = epoch + 1;
    entry.lr = cosine_lr(step, total_steps, config.learning_rate);
    double pp_sum = 0.0;
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      const std::size_t begin = b * batch;
      const std::size_t end = std::min(n, begin + batch);
      Matrix x(end - begin, features.cols());
      std::vector<std::uint32_t> y;
      for (std::size_t k = begin; k < end; ++k) {
        const auto src = features.row(order[k]);
        std::copy(src.begin(), src.end(), x.row(k - begin).begin());
        y.push_back(support.labels[order[k]]);
      }
      GradientResult g;
      try {
        g = rtm_gradients(x, y, result.params, targets, loss_cfg);
      } catch (const Error& e) {
        if (e.code() != Errc::divergence) throw;
        throw Error(Errc::divergence, "training diverged at epoch " + std::to_string(epoch + 1) +
                                          ", batch " + std::to_string(b + 1) + ": " + e.what());
      }
      const double lr = cosine_lr(step, total_steps, config.learning_rate);
      optimizer_step(result.params, g.grad, state, lr, config.weight_decay,
                     config.trainable_set);
      ++step;
      entry.mean_ce += g.mean_ce * static_cast<double>(end - begin) / static_cast<double>(n);
      pp_sum += g.pp.total;
    }
    entry.mean_pp = pp_sum / static_cast<double>(batches_per_epoch);
    entry.total_loss = entry.mean_ce + config.gamma * entry.mean_pp;
    entry.support_accuracy = fused_accuracy(support, result.params, targets, loss_cfg);
    for (const Matrix* t : result.params.tensors()) {
      for (double v : t->data()) {
        if (!std::isfinite(v)) {
          throw Error(Errc::divergence,
                      "non-finite parameters after epoch " + std::to_string(epoch + 1));
        }
      }
    }
    result.log.push_back(entry);
  }
  return result;
}

void write_train_log(const std::vector<EpochLog>& log, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::io_failure, "cannot write " + path.string());
  out << "epoch,mean_ce,mean_pp,total_loss,support_accuracy,lr\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.mean_ce,
                  e.mean_pp, e.total_loss, e.support_accuracy, e.lr);
    out << buf;
  }
}

void save_checkpoint(const fs::path& dir, const TrainResult& result, const TrainConfig& config,
                     const SupportProvenance& provenance) {
  CheckpointMeta meta;
  meta.tau_rel = config.tau;
  meta.init_mode = config.projection_init == ProjectionInit::identity ? "identity" : "random";
  meta.anchor_init = config.anchor_init;
  meta.seed = config.seed;
  save_params(result.params, meta, dir);

  nlohmann::ordered_json j;
  j["shots"] = config.shots;
  j["epochs"] = config.epochs;
  j["batch_size"] = config.batch_size;
  j["learning_rate"] = config.learning_rate;
  j["weight_decay"] = config.weight_decay;
  j["tau"] = config.tau;
  j["tau_prime"] = config.tau_prime;
  j["attn_temperature"] = config.attn_temperature;
  j["alpha"] = config.alpha;
  j["gamma"] = config.gamma;
  j["clip_scale"] = config.scale();
  j["num_anchors"] = config.num_anchors;
  j["seed"] = config.seed;
  j["trainable_set"] = to_string(config.trainable_set);
  j["projection_init"] = meta.init_mode;
  j["anchor_init"] = config.anchor_init;
  j["support_source"] = provenance.source;
  j["support_indices"] = provenance.indices;
  std::ofstream out(dir / "train_config.json", std::ios::trunc);
  if (!out) throw Error(Errc::io_failure, "cannot write train_config.json");
  out << j.dump(2) << '\n';
  write_train_log(result.log, dir / "train_log.csv");
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  LoadedCheckpoint c;
  c.params = load_params(dir, &c.meta);
  c.clip_scale = 1.0 / c.meta.tau_rel;
  std::ifstream in(dir / "train_config.json");
  if (in) {
    nlohmann::json j;
    try {
      in >> j;
      c.alpha = j.value("alpha", 1.0);
      c.clip_scale = j.value("clip_scale", c.clip_scale);
      if (j.contains("support_source")) {
        c.provenance = SupportProvenance{j["support_source"].get<std::string>(),
                                         j["support_indices"].get<std::vector<std::size_t>>()};
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::parse_error, std::string("train_config.json: ") + e.what());
    }
  }
  return c;
}

FewShotRun train_from_bundle(const ValidatedBundle& bundle, TrainConfig config) {
  const Matrix targets = bundle.targets.to_matrix();
  AnchorInit anchor_init;
  if (config.anchor_init == "auto") config.anchor_init = bundle.anchors ? "manifest" : "random";
  if (config.anchor_init == "manifest") {
    if (!bundle.anchors) {
      throw Error(Errc::invalid_argument, "anchor init 'manifest' but the manifest lists no anchors");
    }
    anchor_init = {AnchorInitKind::from_features, bundle.anchors->to_matrix()};
  } else if (config.anchor_init.rfind("file:", 0) == 0) {
    EmbeddingMatrix anchors = load_embeddings(config.anchor_init.substr(5));
    if (!anchors.normalized) anchors = l2_normalize(anchors);
    anchor_init = {AnchorInitKind::from_features, anchors.to_matrix()};
  } else if (config.anchor_init != "random") {
    throw Error(Errc::invalid_argument,
                "anchor init must be auto, manifest, random or file:PATH, got " + config.anchor_init);
  }
  if (anchor_init.features) config.num_anchors = anchor_init.features->rows();
  config.validate();

  FewShotRun run;
  const LabeledImageSet& pool = bundle.support ? *bundle.support : bundle.images;
  run.provenance.source = bundle.support ? "support" : "images";
  run.provenance.indices = sample_few_shot(pool.labels, pool.class_count, config.shots, config.seed);
  const LabeledImageSet support = subset(pool, run.provenance.indices);
  const RtmParams init = rtm_init(targets.rows(), config.num_anchors, targets.cols(),
                                  config.projection_init, anchor_init, config.seed,
                                  config.attn_temperature);
  run.result = train_few_shot(config, support, targets, init);
  run.config = std::move(config);
  return run;
}

}  // namespace relt
