#include "relt/rtm.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include <json.hpp>

#include "relt/error.hpp"
#include "relt/random.hpp"
#include "relt/transition.hpp"

namespace relt {

namespace fs = std::filesystem;

std::array<Matrix*, RtmParams::kTensorCount> RtmParams::tensors() {
  return {&anchors, &w_q, &w_k, &ffn_w1, &ffn_b1, &ffn_w2, &ffn_b2, &ln_gain, &ln_bias};
}

std::array<const Matrix*, RtmParams::kTensorCount> RtmParams::tensors() const {
  return {&anchors, &w_q, &w_k, &ffn_w1, &ffn_b1, &ffn_w2, &ffn_b2, &ln_gain, &ln_bias};
}

RtmParams RtmParams::zeros_like() const {
  RtmParams z = *this;
  for (Matrix* t : z.tensors()) t->data().assign(t->size(), 0.0);
  return z;
}

std::size_t RtmParams::parameter_count() const {
  std::size_t n = 0;
  for (const Matrix* t : tensors()) n += t->size();
  return n;
}

RtmParams rtm_init(std::size_t c_tar, std::size_t c_anc, std::size_t dim, ProjectionInit mode,
                   const AnchorInit& anchor_init, std::uint64_t seed, double attn_temperature) {
  if (c_tar == 0 || c_anc == 0 || dim == 0) {
    throw Error(Errc::invalid_argument, "rtm_init: dimensions must be positive");
  }
  if (!(attn_temperature > 0.0)) {
    throw Error(Errc::invalid_argument, "rtm_init: attention temperature must be positive");
  }
  const std::size_t hidden = kFfnExpansion * c_tar;
  RtmParams p;
  p.attn_temperature = attn_temperature;
  p.w_q = Matrix::identity(dim);
  p.w_k = Matrix::identity(dim);
  p.ffn_w1 = Matrix(c_tar, hidden);
  p.ffn_b1 = Matrix(1, hidden);
  p.ffn_w2 = Matrix(hidden, c_tar);
  p.ffn_b2 = Matrix(1, c_tar);
  p.ln_gain = Matrix(1, c_tar, 1.0);
  p.ln_bias = Matrix(1, c_tar);

  // Separate streams so the anchor draw does not depend on the projection mode.
  Rng proj_rng(seed);
  Rng anchor_rng(seed ^ 0x9E3779B97F4A7C15ull);

  if (mode == ProjectionInit::random) {
    for (double& v : p.w_q.data()) v += 0.01 * proj_rng.normal();
    for (double& v : p.w_k.data()) v += 0.01 * proj_rng.normal();
    const double w1_std = 1.0 / std::sqrt(static_cast<double>(c_tar));
    for (double& v : p.ffn_w1.data()) v = w1_std * proj_rng.normal();
  }

  if (anchor_init.kind == AnchorInitKind::from_features) {
    if (!anchor_init.features) {
      throw Error(Errc::invalid_argument, "rtm_init: from_features needs an anchor matrix");
    }
    const Matrix& f = *anchor_init.features;
    if (f.cols() != dim) {
      throw Error(Errc::dimension_mismatch, "rtm_init: anchor feature dim " +
                                                std::to_string(f.cols()) + " != " +
                                                std::to_string(dim));
    }
    if (f.rows() != c_anc) {
      throw Error(Errc::dimension_mismatch, "rtm_init: anchor feature rows " +
                                                std::to_string(f.rows()) + " != C_anc " +
                                                std::to_string(c_anc));
    }
    p.anchors = f;
  } else {
    p.anchors = Matrix(c_anc, dim);
    for (double& v : p.anchors.data()) v = anchor_rng.normal();
  }
  for (std::size_t j = 0; j < c_anc; ++j) {
    const auto row = p.anchors.row(j);
    if (dot(row, row) == 0.0) {
      throw Error(Errc::zero_norm, "rtm_init: zero-norm anchor row " + std::to_string(j));
    }
  }
  return p;
}

RtmContext rtm_prepare(const RtmParams& params, const Matrix& targets, double tau_rel) {
  if (targets.cols() != params.dim()) {
    throw Error(Errc::dimension_mismatch, "rtm: target dim " + std::to_string(targets.cols()) +
                                              " != anchor dim " + std::to_string(params.dim()));
  }
  if (targets.rows() != params.c_tar()) {
    throw Error(Errc::dimension_mismatch, "rtm: target rows " + std::to_string(targets.rows()) +
                                              " != C_tar " + std::to_string(params.c_tar()));
  }
  RtmContext ctx;
  ctx.anchors_unit = params.anchors;
  ctx.anchor_norms.resize(params.c_anc());
  for (std::size_t j = 0; j < params.c_anc(); ++j) {
    auto row = ctx.anchors_unit.row(j);
    const double n = std::sqrt(dot(row, row));
    if (n == 0.0) throw Error(Errc::zero_norm, "rtm: zero-norm anchor row " + std::to_string(j));
    ctx.anchor_norms[j] = n;
    for (double& v : row) v /= n;
  }
  ctx.relations = build_relation_set(targets, ctx.anchors_unit, tau_rel);
  ctx.keys = matmul(ctx.anchors_unit, params.w_k);
  return ctx;
}

namespace {

struct ForwardCache {
  Vector query;    // D
  Vector attn;     // C_anc
  Vector head;     // C_tar
  Vector xhat;     // C_tar
  double inv_std = 0.0;
  Vector normed;   // C_tar, LayerNorm output
  Vector hidden_pre;  // H
  Vector hidden;   // H
  Vector out;      // C_tar
};

ForwardCache forward_cached(std::span<const double> image, const RtmParams& params,
                            const RtmContext& ctx) {
  if (image.size() != params.dim()) {
    throw Error(Errc::dimension_mismatch, "rtm_forward: image dim " +
                                              std::to_string(image.size()) + " != " +
                                              std::to_string(params.dim()));
  }
  const std::size_t c_tar = params.c_tar();
  const std::size_t hidden = params.hidden();
  ForwardCache fc;
  fc.query = vecmat(image, params.w_q);
  Vector scores = matvec(ctx.keys, fc.query);
  fc.attn = softmax(scores, params.attn_temperature);
  fc.head = matvec(ctx.relations.over_anchors.values, fc.attn);

  double mean = 0.0;
  for (double v : fc.head) mean += v;
  mean /= static_cast<double>(c_tar);
  double var = 0.0;
  for (double v : fc.head) var += (v - mean) * (v - mean);
  var /= static_cast<double>(c_tar);
  fc.inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
  fc.xhat.resize(c_tar);
  fc.normed.resize(c_tar);
  for (std::size_t i = 0; i < c_tar; ++i) {
    fc.xhat[i] = (fc.head[i] - mean) * fc.inv_std;
    fc.normed[i] = params.ln_gain(0, i) * fc.xhat[i] + params.ln_bias(0, i);
  }

  fc.hidden_pre = vecmat(fc.normed, params.ffn_w1);
  fc.hidden.resize(hidden);
  for (std::size_t k = 0; k < hidden; ++k) {
    fc.hidden_pre[k] += params.ffn_b1(0, k);
    fc.hidden[k] = fc.hidden_pre[k] > 0.0 ? fc.hidden_pre[k] : 0.0;
  }
  fc.out = vecmat(fc.hidden, params.ffn_w2);
  for (std::size_t i = 0; i < c_tar; ++i) fc.out[i] += params.ffn_b2(0, i) + fc.head[i];
  return fc;
}

// Accumulates one sample's backward pass. Anchor gradients are collected in
// unit-anchor space (d_unit) and relation space (d_relation) and pushed
// through the relation softmax and the row normalization once per batch.
void backward_sample(std::span<const double> image, const RtmParams& params,
                     const RtmContext& ctx, const ForwardCache& fc,
                     std::span<const double> d_out, double weight, RtmParams& grad,
                     Matrix& d_unit, Matrix& d_relation) {
  const std::size_t c_tar = params.c_tar();
  const std::size_t c_anc = params.c_anc();
  const std::size_t dim = params.dim();
  const std::size_t hidden = params.hidden();

  Vector d_head(d_out.begin(), d_out.end());
  for (double& v : d_head) v *= weight;

  // FFN: out = head + relu(normed W1 + b1) W2 + b2
  const Vector d_z2 = d_head;
  Vector d_hidden(hidden, 0.0);
  for (std::size_t k = 0; k < hidden; ++k) {
    const auto w2_row = params.ffn_w2.row(k);
    auto g_row = grad.ffn_w2.row(k);
    double acc = 0.0;
    for (std::size_t i = 0; i < c_tar; ++i) {
      g_row[i] += fc.hidden[k] * d_z2[i];
      acc += w2_row[i] * d_z2[i];
    }
    d_hidden[k] = fc.hidden_pre[k] > 0.0 ? acc : 0.0;
  }
  for (std::size_t i = 0; i < c_tar; ++i) grad.ffn_b2(0, i) += d_z2[i];
  Vector d_normed(c_tar, 0.0);
  for (std::size_t i = 0; i < c_tar; ++i) {
    const auto w1_row = params.ffn_w1.row(i);
    auto g_row = grad.ffn_w1.row(i);
    double acc = 0.0;
    for (std::size_t k = 0; k < hidden; ++k) {
      g_row[k] += fc.normed[i] * d_hidden[k];
      acc += w1_row[k] * d_hidden[k];
    }
    d_normed[i] = acc;
  }
  for (std::size_t k = 0; k < hidden; ++k) grad.ffn_b1(0, k) += d_hidden[k];

  // LayerNorm
  Vector d_xhat(c_tar);
  double mean_dx = 0.0;
  double mean_dx_xhat = 0.0;
  for (std::size_t i = 0; i < c_tar; ++i) {
    grad.ln_gain(0, i) += d_normed[i] * fc.xhat[i];
    grad.ln_bias(0, i) += d_normed[i];
    d_xhat[i] = d_normed[i] * params.ln_gain(0, i);
    mean_dx += d_xhat[i];
    mean_dx_xhat += d_xhat[i] * fc.xhat[i];
  }
  mean_dx /= static_cast<double>(c_tar);
  mean_dx_xhat /= static_cast<double>(c_tar);
  for (std::size_t i = 0; i < c_tar; ++i) {
    d_head[i] += fc.inv_std * (d_xhat[i] - mean_dx - fc.xhat[i] * mean_dx_xhat);
  }

  // head = R a
  Vector d_attn(c_anc, 0.0);
  for (std::size_t i = 0; i < c_tar; ++i) {
    const auto r_row = ctx.relations.over_anchors.values.row(i);
    auto g_row = d_relation.row(i);
    for (std::size_t j = 0; j < c_anc; ++j) {
      g_row[j] += d_head[i] * fc.attn[j];
      d_attn[j] += r_row[j] * d_head[i];
    }
  }

  // a = softmax(keys q / t)
  double a_dot = 0.0;
  for (std::size_t j = 0; j < c_anc; ++j) a_dot += fc.attn[j] * d_attn[j];
  Vector d_score(c_anc);
  for (std::size_t j = 0; j < c_anc; ++j) {
    d_score[j] = fc.attn[j] * (d_attn[j] - a_dot) / params.attn_temperature;
  }

  // score_j = q . k_j with q = f W_q, k_j = A_j W_k
  Vector d_query(dim, 0.0);
  Vector unit_mix(dim, 0.0);  // sum_j d_score_j A_j
  for (std::size_t j = 0; j < c_anc; ++j) {
    const double s = d_score[j];
    const auto k_row = ctx.keys.row(j);
    const auto a_row = ctx.anchors_unit.row(j);
    for (std::size_t e = 0; e < dim; ++e) {
      d_query[e] += s * k_row[e];
      unit_mix[e] += s * a_row[e];
    }
  }
  const Vector wk_query = matvec(params.w_k, fc.query);
  for (std::size_t j = 0; j < c_anc; ++j) {
    auto g_row = d_unit.row(j);
    for (std::size_t d = 0; d < dim; ++d) g_row[d] += d_score[j] * wk_query[d];
  }
  for (std::size_t d = 0; d < dim; ++d) {
    auto gq = grad.w_q.row(d);
    auto gk = grad.w_k.row(d);
    const double f_d = image[d];
    const double m_d = unit_mix[d];
    for (std::size_t e = 0; e < dim; ++e) {
      gq[e] += f_d * d_query[e];
      gk[e] += m_d * fc.query[e];
    }
  }
}

void check_batch(const Matrix& features, std::span<const std::uint32_t> labels,
                 const Matrix& targets) {
  if (features.rows() == 0) throw Error(Errc::invalid_argument, "rtm: empty batch");
  if (features.rows() != labels.size()) {
    throw Error(Errc::dimension_mismatch, "rtm: batch labels length mismatch");
  }
  for (auto l : labels) {
    if (l >= targets.rows()) throw Error(Errc::label_out_of_range, "rtm: label out of range");
  }
}

}  // namespace

Vector rtm_forward(std::span<const double> image, const RtmParams& params,
                   const RtmContext& ctx) {
  return forward_cached(image, params, ctx).out;
}

Vector rtm_forward(std::span<const double> image, const RtmParams& params,
                   const Matrix& targets, double tau_rel) {
  return rtm_forward(image, params, rtm_prepare(params, targets, tau_rel));
}

Vector fused_logits(std::span<const double> image, const Matrix& targets,
                    std::span<const double> rtm_out, const LossConfig& config) {
  Vector logits(targets.rows());
  for (std::size_t i = 0; i < targets.rows(); ++i) {
    logits[i] = config.clip_scale * (dot(image, targets.row(i)) + config.alpha * rtm_out[i]);
  }
  return logits;
}

GradientResult rtm_gradients(const Matrix& features, std::span<const std::uint32_t> labels,
                             const RtmParams& params, const Matrix& targets,
                             const LossConfig& config) {
  check_batch(features, labels, targets);
  const RtmContext ctx = rtm_prepare(params, targets, config.tau_rel);
  const std::size_t c_tar = params.c_tar();
  const std::size_t c_anc = params.c_anc();
  const std::size_t dim = params.dim();
  const double weight = 1.0 / static_cast<double>(features.rows());

  GradientResult res;
  res.grad = params.zeros_like();
  Matrix d_unit(c_anc, dim);
  Matrix d_relation(c_tar, c_anc);
  Vector d_logits(c_tar);

  for (std::size_t n = 0; n < features.rows(); ++n) {
    const auto image = features.row(n);
    const ForwardCache fc = forward_cached(image, params, ctx);
    const Vector logits = fused_logits(image, targets, fc.out, config);
    double ce = 0.0;
    try {
      ce = cross_entropy(logits, labels[n], d_logits);
    } catch (const Error& e) {
      throw Error(Errc::divergence, "non-finite loss at sample " + std::to_string(n));
    }
    if (!std::isfinite(ce)) {
      throw Error(Errc::divergence, "non-finite loss at sample " + std::to_string(n));
    }
    res.mean_ce += weight * ce;
    if (argmax(logits) == labels[n]) ++res.correct;
    // logits = scale * (cos + alpha * out)
    for (double& g : d_logits) g *= config.clip_scale * config.alpha;
    backward_sample(image, params, ctx, fc, d_logits, weight, res.grad, d_unit, d_relation);
  }

  // Relation rows: R_i = softmax_j(cos(T_i, A_j) / tau)
  Matrix d_cos(c_tar, c_anc);
  for (std::size_t i = 0; i < c_tar; ++i) {
    const auto r_row = ctx.relations.over_anchors.values.row(i);
    const auto g_row = d_relation.row(i);
    const double inner = dot(r_row, g_row);
    for (std::size_t j = 0; j < c_anc; ++j) {
      d_cos(i, j) = r_row[j] * (g_row[j] - inner) / config.tau_rel;
    }
  }

  res.loss = res.mean_ce;
  if (config.gamma > 0.0) {
    const RelationMatrix& p = ctx.relations.over_targets;
    Matrix d_p;
    res.pp = pp_loss(p, &d_p);
    res.loss += config.gamma * res.pp.total;
    // Columns: P_j = softmax_i(cos(T_i, A_j) / tau)
    for (std::size_t j = 0; j < c_anc; ++j) {
      double inner = 0.0;
      for (std::size_t i = 0; i < c_tar; ++i) inner += p.values(i, j) * d_p(i, j);
      for (std::size_t i = 0; i < c_tar; ++i) {
        d_cos(i, j) += config.gamma * p.values(i, j) * (d_p(i, j) - inner) / config.tau_rel;
      }
    }
  }
  if (!std::isfinite(res.loss)) throw Error(Errc::divergence, "non-finite PP loss");

  // cos = T A^T (the clamp is treated as identity inside [-1, 1])
  for (std::size_t i = 0; i < c_tar; ++i) {
    const auto t_row = targets.row(i);
    for (std::size_t j = 0; j < c_anc; ++j) {
      const double g = d_cos(i, j);
      if (g == 0.0) continue;
      auto u_row = d_unit.row(j);
      for (std::size_t d = 0; d < dim; ++d) u_row[d] += g * t_row[d];
    }
  }

  // A_j = anchors_j / |anchors_j|
  for (std::size_t j = 0; j < c_anc; ++j) {
    const auto a_row = ctx.anchors_unit.row(j);
    const auto u_row = d_unit.row(j);
    const double radial = dot(a_row, u_row);
    auto g_row = res.grad.anchors.row(j);
    for (std::size_t d = 0; d < dim; ++d) {
      g_row[d] = (u_row[d] - a_row[d] * radial) / ctx.anchor_norms[j];
    }
  }
  return res;
}

GradientResult rtm_gradients(const LabeledImageSet& batch, const RtmParams& params,
                             const Matrix& targets, const LossConfig& config) {
  batch.check();
  return rtm_gradients(batch.features.to_matrix(), batch.labels, params, targets, config);
}

double rtm_loss(const Matrix& features, std::span<const std::uint32_t> labels,
                const RtmParams& params, const Matrix& targets, const LossConfig& config) {
  check_batch(features, labels, targets);
  const RtmContext ctx = rtm_prepare(params, targets, config.tau_rel);
  double mean_ce = 0.0;
  const double weight = 1.0 / static_cast<double>(features.rows());
  for (std::size_t n = 0; n < features.rows(); ++n) {
    const auto image = features.row(n);
    const Vector out = rtm_forward(image, params, ctx);
    mean_ce += weight * cross_entropy(fused_logits(image, targets, out, config), labels[n]);
  }
  double loss = mean_ce;
  if (config.gamma > 0.0) {
    loss += config.gamma * pp_loss(ctx.relations.over_targets).total;
  }
  return loss;
}

std::vector<std::uint8_t> rtm_active_pattern(const Matrix& features, const RtmParams& params,
                                             const Matrix& targets, const LossConfig& config) {
  const RtmContext ctx = rtm_prepare(params, targets, config.tau_rel);
  std::vector<std::uint8_t> pattern;
  for (std::size_t n = 0; n < features.rows(); ++n) {
    const ForwardCache fc = forward_cached(features.row(n), params, ctx);
    for (double v : fc.hidden_pre) pattern.push_back(v > 0.0 ? 1 : 0);
  }
  if (config.gamma > 0.0) {
    const RelationMatrix& p = ctx.relations.over_targets;
    Vector column(p.targets());
    for (std::size_t j = 0; j < p.anchors(); ++j) {
      for (std::size_t i = 0; i < p.targets(); ++i) column[i] = p.values(i, j);
      const bool one_hot = kmeans_1d(column, 3).clusters.back().indices.size() == 1;
      pattern.push_back(one_hot ? 1 : 0);
      if (!one_hot) continue;
      const Vector q = pp_pseudo_label(column);
      for (double v : q) pattern.push_back(v == 0.3 ? 1 : 0);
    }
  }
  return pattern;
}

namespace {

const char* init_name(ProjectionInit m) {
  return m == ProjectionInit::identity ? "identity" : "random";
}

}  // namespace

void save_params(const RtmParams& params, const CheckpointMeta& meta, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(Errc::io_failure, "cannot create checkpoint dir " + dir.string());
  nlohmann::ordered_json j;
  j["format"] = "relt-checkpoint";
  j["version"] = 1;
  j["c_tar"] = params.c_tar();
  j["c_anc"] = params.c_anc();
  j["dim"] = params.dim();
  j["hidden"] = params.hidden();
  j["attn_temperature"] = params.attn_temperature;
  j["tau_rel"] = meta.tau_rel;
  j["init_mode"] = meta.init_mode;
  j["anchor_init"] = meta.anchor_init;
  j["seed"] = meta.seed;
  auto& shapes = j["tensors"];
  const auto tensors = params.tensors();
  for (std::size_t t = 0; t < RtmParams::kTensorCount; ++t) {
    const std::string name = RtmParams::kTensorNames[t];
    save_embeddings(EmbeddingMatrix::from_matrix(*tensors[t]), dir / (name + ".rteb"));
    shapes[name] = {tensors[t]->rows(), tensors[t]->cols()};
  }
  std::ofstream out(dir / "params.json", std::ios::trunc);
  if (!out) throw Error(Errc::io_failure, "cannot write params.json");
  out << j.dump(2) << '\n';
}

RtmParams load_params(const fs::path& dir, CheckpointMeta* meta) {
  std::ifstream in(dir / "params.json");
  if (!in) throw Error(Errc::missing_file, "checkpoint has no params.json: " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse_error, std::string("params.json: ") + e.what());
  }
  RtmParams p;
  p.attn_temperature = j.at("attn_temperature").get<double>();
  auto tensors = p.tensors();
  for (std::size_t t = 0; t < RtmParams::kTensorCount; ++t) {
    const std::string name = RtmParams::kTensorNames[t];
    const auto e = load_embeddings(dir / (name + ".rteb"));
    const auto shape = j.at("tensors").at(name);
    if (e.rows != shape.at(0).get<std::size_t>() || e.dim != shape.at(1).get<std::size_t>()) {
      throw Error(Errc::dimension_mismatch, "checkpoint tensor " + name + " shape mismatch");
    }
    *tensors[t] = e.to_matrix();
  }
  if (p.w_q.rows() != p.dim() || p.ffn_w1.rows() != p.c_tar() ||
      p.ffn_w2.cols() != p.c_tar() || p.ffn_w2.rows() != p.hidden()) {
    throw Error(Errc::dimension_mismatch, "checkpoint tensors have inconsistent shapes");
  }
  if (meta) {
    meta->tau_rel = j.value("tau_rel", 0.01);
    meta->init_mode = j.value("init_mode", std::string(init_name(ProjectionInit::identity)));
    meta->anchor_init = j.value("anchor_init", std::string("random"));
    meta->seed = j.value("seed", std::uint64_t{0});
  }
  return p;
}

}  // namespace relt
