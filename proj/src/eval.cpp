#include "relt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "relt/error.hpp"
#include "relt/parallel.hpp"

namespace relt {

namespace {

using ojson = nlohmann::ordered_json;

EvalReport summarize(const std::vector<PredictionRecord>& preds,
                     const std::vector<std::uint32_t>& labels, std::size_t class_count,
                     std::string mode) {
  EvalReport r;
  r.mode = std::move(mode);
  r.sample_count = preds.size();
  std::vector<std::size_t> total(class_count, 0), hit(class_count, 0);
  for (std::size_t n = 0; n < preds.size(); ++n) {
    const auto& p = preds[n];
    const std::uint32_t y = labels[n];
    ++total[y];
    if (p.fused_argmax == y) {
      ++hit[y];
      ++r.correct;
    }
    r.branch_accuracies["clip"] += p.clip_argmax == y ? 1.0 : 0.0;
    r.branch_accuracies["fused"] += p.fused_argmax == y ? 1.0 : 0.0;
    for (const auto& [name, am] : p.per_branch_argmax) {
      r.branch_accuracies[name] += am == y ? 1.0 : 0.0;
    }
  }
  const double n = static_cast<double>(preds.size());
  for (auto& [_, v] : r.branch_accuracies) v /= n;
  r.top1_accuracy = static_cast<double>(r.correct) / n;
  r.per_class_accuracy.resize(class_count);
  for (std::size_t c = 0; c < class_count; ++c) {
    r.per_class_accuracy[c] =
        total[c] ? static_cast<double>(hit[c]) / static_cast<double>(total[c]) : 0.0;
  }
  return r;
}

}  // namespace

double top1_accuracy(const std::vector<Vector>& predictions, std::span<const std::uint32_t> labels) {
  if (predictions.empty()) throw Error(Errc::invalid_argument, "top1_accuracy: empty input");
  if (predictions.size() != labels.size()) {
    throw Error(Errc::dimension_mismatch, "top1_accuracy: predictions/labels length mismatch");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (argmax(predictions[i]) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

EvalResult evaluate_zero_shot(const ValidatedBundle& bundle, const ZeroShotConfig& config) {
  const std::uint64_t builds_before = relation_build_count();
  const Matrix targets = bundle.targets.to_matrix();
  std::optional<Matrix> anchors;
  if (bundle.anchors) anchors = bundle.anchors->to_matrix();

  ZeroShotConfig cfg = config;
  ZeroShotContext ctx = prepare_zero_shot(targets, anchors, bundle.support, cfg);
  if (anchors && !ctx.relations) {
    // Anchors without an anchor-based variant: still report the balance diagnostic.
    ctx.anchors = *anchors;
    ctx.relations = build_relation_set(targets, *anchors, cfg.tau);
  }

  const Matrix images = bundle.images.features.to_matrix();
  std::vector<PredictionRecord> preds(images.rows());
  parallel_for(images.rows(), [&](std::size_t n) {
    const auto image = images.row(n);
    PredictionBundle b = zero_shot_predict(image, ctx, cfg);
    PredictionRecord& rec = preds[n];
    rec.image_index = n;
    rec.clip_argmax = argmax(b.clip_scores);
    rec.fused_argmax = argmax(b.fused);
    for (const auto& [branch, scores] : b.branch_scores) {
      rec.per_branch_argmax[branch_name(branch)] = argmax(scores);
    }
    rec.fused_scores = std::move(b.fused);
  });

  EvalResult res;
  res.report = summarize(preds, bundle.images.labels, bundle.targets.rows, "zero-shot");
  if (ctx.relations) res.report.marginal_balance = marginal_balance(ctx.relations->over_targets);
  res.predictions = std::move(preds);
  res.relation_builds = relation_build_count() - builds_before;
  return res;
}

EvalResult evaluate_checkpoint(const ValidatedBundle& bundle, const LoadedCheckpoint& checkpoint,
                               const std::vector<std::size_t>& exclude) {
  const std::uint64_t builds_before = relation_build_count();
  const Matrix targets = bundle.targets.to_matrix();
  const RtmParams& params = checkpoint.params;
  const RtmContext ctx = rtm_prepare(params, targets, checkpoint.meta.tau_rel);
  LossConfig cfg;
  cfg.tau_rel = checkpoint.meta.tau_rel;
  cfg.clip_scale = checkpoint.clip_scale;
  cfg.alpha = checkpoint.alpha;

  const std::set<std::size_t> skip(exclude.begin(), exclude.end());
  std::vector<std::size_t> kept;
  for (std::size_t n = 0; n < bundle.images.size(); ++n) {
    if (!skip.contains(n)) kept.push_back(n);
  }
  if (kept.empty()) throw Error(Errc::invalid_argument, "evaluate: no images left to evaluate");

  const Matrix images = bundle.images.features.to_matrix();
  std::vector<PredictionRecord> preds(kept.size());
  parallel_for(kept.size(), [&](std::size_t k) {
    const std::size_t n = kept[k];
    const auto image = images.row(n);
    const Vector out = rtm_forward(image, params, ctx);
    const Vector clip = clip_scores(image, targets, cfg.clip_scale);
    Vector fused = fused_logits(image, targets, out, cfg);
    PredictionRecord& rec = preds[k];
    rec.image_index = n;
    rec.clip_argmax = argmax(clip);
    rec.fused_argmax = argmax(fused);
    rec.per_branch_argmax["rtm"] = argmax(out);
    rec.fused_scores = std::move(fused);
  });

  std::vector<std::uint32_t> labels;
  labels.reserve(kept.size());
  for (std::size_t n : kept) labels.push_back(bundle.images.labels[n]);

  EvalResult res;
  res.report = summarize(preds, labels, bundle.targets.rows, "checkpoint");
  res.report.marginal_balance = marginal_balance(ctx.relations.over_targets);
  res.predictions = std::move(preds);
  res.relation_builds = relation_build_count() - builds_before;
  return res;
}

std::string report_json(const EvalReport& r) {
  ojson j;
  j["mode"] = r.mode;
  j["sample_count"] = r.sample_count;
  j["correct"] = r.correct;
  j["top1_accuracy"] = r.top1_accuracy;
  j["per_class_accuracy"] = r.per_class_accuracy;
  ojson branches = ojson::object();
  for (const auto& [name, acc] : r.branch_accuracies) branches[name] = acc;
  j["branch_accuracies"] = branches;
  j["marginal_balance"] = r.marginal_balance ? ojson(*r.marginal_balance) : ojson();
  return j.dump(2);
}

std::string prediction_json(const PredictionRecord& p) {
  ojson j;
  j["image_index"] = p.image_index;
  j["clip_argmax"] = p.clip_argmax;
  j["fused_argmax"] = p.fused_argmax;
  ojson branches = ojson::object();
  for (const auto& [name, am] : p.per_branch_argmax) branches[name] = am;
  j["per_branch_argmax"] = branches;
  j["fused_scores"] = p.fused_scores;
  return j.dump();
}

void write_report(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::io_failure, "cannot write " + path.string());
  out << report_json(report) << '\n';
}

void write_predictions(const std::vector<PredictionRecord>& predictions,
                       const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::io_failure, "cannot write " + path.string());
  for (const auto& p : predictions) out << prediction_json(p) << '\n';
}

InspectReport inspect_relations(const Matrix& targets, const Matrix& anchors, double tau) {
  InspectReport rep;
  rep.relations = build_relation_set(targets, anchors, tau);
  const RelationMatrix& p = rep.relations.over_targets;
  rep.marginal_balance = marginal_balance(p);
  const std::size_t c_tar = p.targets();
  const std::size_t c_anc = p.anchors();
  const std::size_t k = std::min<std::size_t>(3, c_tar);
  const double log_c = std::log(static_cast<double>(c_tar));
  Vector column(c_tar);
  Vector marginal(c_tar, 0.0);
  for (std::size_t j = 0; j < c_anc; ++j) {
    double h = 0.0;
    for (std::size_t i = 0; i < c_tar; ++i) {
      column[i] = p.values(i, j);
      marginal[i] += column[i] / static_cast<double>(c_anc);
      if (column[i] > 0.0) h -= column[i] * std::log(column[i]);
    }
    const std::size_t top = kmeans_1d(column, k).clusters.back().indices.size();
    rep.top_cluster_sizes.push_back(top);
    const double normalized = c_tar > 1 ? h / log_c : 1.0;
    rep.column_entropy.push_back(normalized);
    if (top == 1) rep.one_hot_anchors.push_back(j);
    if (normalized >= kUniformEntropy) rep.uniform_anchors.push_back(j);
  }
  for (std::size_t i = 0; i < c_tar; ++i) {
    if (marginal[i] < kWeakTargetFraction / static_cast<double>(c_tar)) {
      rep.weak_targets.push_back(i);
    }
  }
  return rep;
}

std::string inspect_json(const InspectReport& r) {
  ojson j;
  j["targets"] = r.relations.over_targets.targets();
  j["anchors"] = r.relations.over_targets.anchors();
  j["marginal_balance"] = r.marginal_balance;
  j["top_cluster_sizes"] = r.top_cluster_sizes;
  j["column_entropy"] = r.column_entropy;
  j["one_hot_anchors"] = r.one_hot_anchors;
  j["uniform_anchors"] = r.uniform_anchors;
  j["weak_targets"] = r.weak_targets;
  return j.dump(2);
}

}  // namespace relt
