// relt: command-line front end for relation-transition classification.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "relt/embed_io.hpp"
#include "relt/error.hpp"
#include "relt/eval.hpp"
#include "relt/gradcheck.hpp"
#include "relt/synthetic.hpp"
#include "relt/train.hpp"

namespace fs = std::filesystem;

namespace {

void print_warnings(const relt::ValidatedBundle& b) {
  for (const auto& w : b.warnings) std::cerr << "warning: " << w << '\n';
}

fs::path sibling_with_suffix(const fs::path& p, const std::string& suffix) {
  fs::path out = p;
  out.replace_extension();
  out += suffix;
  return out;
}

struct ZeroShotArgs {
  std::string manifest;
  std::string anchors;
  std::string variant;
  std::optional<double> alpha;
  std::optional<double> tau;
  std::optional<double> tau_prime;
  std::string out;
  std::string predictions;
};

int run_zero_shot(const ZeroShotArgs& a) {
  relt::DatasetManifest m = relt::load_manifest(a.manifest);
  if (!a.anchors.empty()) m.anchors = fs::path(a.anchors);
  auto bundle = relt::validate_manifest(m);
  print_warnings(bundle);

  relt::ZeroShotConfig cfg;
  cfg.tau = a.tau.value_or(m.tau);
  cfg.tau_prime = a.tau_prime.value_or(m.tau_prime);
  cfg.default_alpha = a.alpha.value_or(m.alpha);
  if (a.variant.empty()) {
    if (bundle.anchors) cfg.variants = {relt::Branch::consistency};
  } else if (a.variant == "all") {
    cfg.variants = {relt::Branch::consistency, relt::Branch::total_prob};
    if (bundle.support) cfg.variants.insert(relt::Branch::image_image);
  } else {
    cfg.variants = {relt::parse_branch(a.variant)};
  }

  const auto result = relt::evaluate_zero_shot(bundle, cfg);
  const std::string json = relt::report_json(result.report);
  std::cout << json << '\n';
  if (!a.out.empty()) {
    relt::write_report(result.report, a.out);
    const fs::path preds = a.predictions.empty()
                               ? sibling_with_suffix(a.out, ".predictions.jsonl")
                               : fs::path(a.predictions);
    relt::write_predictions(result.predictions, preds);
  } else if (!a.predictions.empty()) {
    relt::write_predictions(result.predictions, a.predictions);
  }
  return 0;
}

struct TrainArgs {
  std::string manifest;
  std::size_t shots = 16;
  std::optional<std::size_t> num_anchors;
  std::string anchor_init = "auto";
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  double gamma = 0.0;
  std::uint64_t seed = 0;
  std::string checkpoint;
  std::optional<double> alpha;
  std::optional<std::size_t> batch_size;
  std::optional<double> weight_decay;
  std::string trainable = "all";
  std::string projection_init = "random";
  std::string profile;
  std::string val_manifest;
};

int run_train(const TrainArgs& a) {
  const relt::DatasetManifest m = relt::load_manifest(a.manifest);
  auto bundle = relt::validate_manifest(m);
  print_warnings(bundle);

  relt::TrainConfig cfg = relt::default_train_config(a.profile);
  cfg.shots = a.shots;
  cfg.tau = m.tau;
  cfg.tau_prime = m.tau_prime;
  cfg.attn_temperature = m.tau;
  cfg.alpha = a.alpha.value_or(m.alpha);
  cfg.gamma = a.gamma;
  cfg.seed = a.seed;
  cfg.anchor_init = a.anchor_init;
  if (a.num_anchors) cfg.num_anchors = *a.num_anchors;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.lr) cfg.learning_rate = *a.lr;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.weight_decay) cfg.weight_decay = *a.weight_decay;
  cfg.trainable_set = relt::parse_trainable_set(a.trainable);
  if (a.projection_init == "identity") {
    cfg.projection_init = relt::ProjectionInit::identity;
  } else if (a.projection_init == "random") {
    cfg.projection_init = relt::ProjectionInit::random;
  } else {
    throw relt::Error(relt::Errc::invalid_argument, "unknown projection init " + a.projection_init);
  }
  auto run = relt::train_from_bundle(bundle, cfg);
  for (const auto& e : run.result.log) {
    std::printf("epoch %zu  ce %.6f  pp %.6f  total %.6f  support_acc %.4f  lr %.3g\n", e.epoch,
                e.mean_ce, e.mean_pp, e.total_loss, e.support_accuracy, e.lr);
  }
  if (!a.val_manifest.empty()) {
    const auto val = relt::validate_manifest(relt::load_manifest(a.val_manifest));
    print_warnings(val);
    const auto search = relt::select_alpha(val.images, run.result.params,
                                           bundle.targets.to_matrix(), run.config.loss_config());
    for (std::size_t i = 0; i < search.accuracies.size(); ++i) {
      std::printf("alpha %g  val_acc %.4f\n", relt::kAlphaGrid[i], search.accuracies[i]);
    }
    run.config.alpha = search.alpha;
    std::printf("selected alpha %g\n", search.alpha);
  }
  relt::save_checkpoint(a.checkpoint, run.result, run.config, run.provenance);
  std::printf("checkpoint written to %s\n", a.checkpoint.c_str());
  return 0;
}

int run_eval(const std::string& manifest, const std::string& checkpoint, const std::string& out,
             const std::string& predictions) {
  auto bundle = relt::validate_manifest(relt::load_manifest(manifest));
  print_warnings(bundle);
  const auto ckpt = relt::load_checkpoint(checkpoint);
  std::vector<std::size_t> exclude;
  if (ckpt.provenance && ckpt.provenance->source == "images") exclude = ckpt.provenance->indices;
  const auto result = relt::evaluate_checkpoint(bundle, ckpt, exclude);
  std::cout << relt::report_json(result.report) << '\n';
  if (!out.empty()) {
    relt::write_report(result.report, out);
    relt::write_predictions(result.predictions,
                            predictions.empty() ? sibling_with_suffix(out, ".predictions.jsonl")
                                                : fs::path(predictions));
  } else if (!predictions.empty()) {
    relt::write_predictions(result.predictions, predictions);
  }
  return 0;
}

int run_inspect(const std::string& manifest, const std::string& anchors_path,
                const std::string& heatmap, bool balance_only, std::optional<double> tau) {
  relt::DatasetManifest m = relt::load_manifest(manifest);
  m.anchors = fs::path(anchors_path);
  auto bundle = relt::validate_manifest(m);
  print_warnings(bundle);
  const auto report = relt::inspect_relations(bundle.targets.to_matrix(),
                                              bundle.anchors->to_matrix(), tau.value_or(m.tau));
  relt::write_relation_csv(report.relations.over_anchors, heatmap);
  relt::write_relation_csv(report.relations.over_targets,
                           sibling_with_suffix(heatmap, ".over_targets.csv"));
  if (balance_only) {
    std::printf("marginal_balance %.9g\n", report.marginal_balance);
  } else {
    std::cout << relt::inspect_json(report) << '\n';
  }
  return 0;
}

int run_gradcheck(std::size_t trials, std::uint64_t seed, bool verbose) {
  relt::GradcheckOptions opts;
  opts.trials = trials;
  opts.seed = seed;
  const auto start = std::chrono::steady_clock::now();
  const auto report = relt::run_gradcheck(opts);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (verbose) {
    for (std::size_t i = 0; i < report.trials.size(); ++i) {
      const auto& t = report.trials[i];
      std::printf("trial %3zu  C_tar %2zu  C_anc %2zu  D %2zu  batch %zu  gamma %.3f  "
                  "max_rel %.3e (%s[%zu] analytic %.6e numeric %.6e)\n",
                  i, t.c_tar, t.c_anc, t.dim, t.batch, t.loss.gamma, t.max_rel_error,
                  t.worst_tensor.c_str(), t.worst_index, t.worst_analytic, t.worst_numeric);
    }
  }
  std::printf("trials %zu  parameters checked %zu  skipped at kinks %zu  eps %.0e  time %.2fs\n",
              report.trials.size(), report.parameters_checked, report.skipped_kinks, opts.epsilon,
              seconds);
  std::printf("max relative error %.6e\n", report.max_rel_error);
  return report.max_rel_error < 1e-4 ? 0 : 1;
}

int run_synth(const std::string& out_dir, std::uint64_t seed, std::size_t classes,
              std::size_t dim, std::size_t shots, std::size_t test_per_class,
              std::size_t anchors) {
  relt::SyntheticConfig cfg;
  cfg.seed = seed;
  cfg.classes = classes;
  cfg.dim = dim;
  cfg.shots = shots;
  cfg.test_per_class = test_per_class;
  cfg.num_anchors = anchors;
  const fs::path dir(out_dir);
  relt::write_synthetic(relt::make_synthetic(cfg), dir);
  std::printf("synthetic dataset written to %s\n", dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"relt: relation-transition classification over embedding spaces"};
  app.require_subcommand(1);

  ZeroShotArgs zs;
  auto* zero_shot = app.add_subcommand("zero-shot", "training-free prediction and evaluation");
  zero_shot->add_option("--manifest", zs.manifest, "dataset manifest (JSON)")->required();
  zero_shot->add_option("--anchors", zs.anchors, "anchor features (RTEB), overrides manifest");
  zero_shot->add_option("--variant", zs.variant, "transition branch")
      ->check(CLI::IsMember({"consistency", "total-prob", "image-image", "all"}));
  zero_shot->add_option("--alpha", zs.alpha, "fusion weight");
  zero_shot->add_option("--tau", zs.tau, "relation temperature");
  zero_shot->add_option("--tau-prime", zs.tau_prime, "transition temperature");
  zero_shot->add_option("--out", zs.out, "report JSON path");
  zero_shot->add_option("--predictions", zs.predictions, "prediction dump (JSON lines)");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "few-shot training of anchors and the RTM");
  train->add_option("--manifest", tr.manifest, "dataset manifest (JSON)")->required();
  train->add_option("--shots", tr.shots, "examples per class")->required();
  train->add_option("--num-anchors", tr.num_anchors, "number of anchors (default 80)");
  train->add_option("--anchor-init", tr.anchor_init, "auto | manifest | random | file:PATH (auto: manifest anchors if listed)");
  train->add_option("--epochs", tr.epochs, "epochs (default 20, 100 with --profile eurosat)");
  train->add_option("--lr", tr.lr, "base learning rate (default 1e-5)");
  train->add_option("--gamma", tr.gamma, "PP-loss weight (default 0)");
  train->add_option("--seed", tr.seed, "seed for sampling, init and shuffling");
  train->add_option("--checkpoint", tr.checkpoint, "checkpoint directory")->required();
  train->add_option("--alpha", tr.alpha, "fusion weight (default from manifest)");
  train->add_option("--batch-size", tr.batch_size, "batch size (default 256)");
  train->add_option("--weight-decay", tr.weight_decay, "AdamW weight decay (default 0.01)");
  train->add_option("--trainable", tr.trainable, "all | anchors_only | rtm_only")
      ->check(CLI::IsMember({"all", "anchors_only", "rtm_only"}));
  train->add_option("--projection-init", tr.projection_init, "identity | random")
      ->check(CLI::IsMember({"identity", "random"}));
  train->add_option("--profile", tr.profile, "hyperparameter profile: eurosat | synthetic");
  train->add_option("--val-manifest", tr.val_manifest,
                    "held-out manifest for choosing alpha from {0.25, 0.5, 1, 2, 4}");

  std::string ev_manifest, ev_checkpoint, ev_out, ev_predictions;
  auto* eval = app.add_subcommand("eval", "evaluate a trained checkpoint");
  eval->add_option("--manifest", ev_manifest, "dataset manifest (JSON)")->required();
  eval->add_option("--checkpoint", ev_checkpoint, "checkpoint directory")->required();
  eval->add_option("--out", ev_out, "report JSON path");
  eval->add_option("--predictions", ev_predictions, "prediction dump (JSON lines)");

  std::string in_manifest, in_anchors, in_heatmap;
  bool in_balance = false;
  std::optional<double> in_tau;
  auto* inspect = app.add_subcommand("inspect", "relation heatmaps and anchor diagnostics");
  inspect->add_option("--manifest", in_manifest, "dataset manifest (JSON)")->required();
  inspect->add_option("--anchors", in_anchors, "anchor features (RTEB)")->required();
  inspect->add_option("--heatmap", in_heatmap, "CSV output (over_anchors)")->required();
  inspect->add_flag("--balance", in_balance, "print only the marginal balance");
  inspect->add_option("--tau", in_tau, "relation temperature (default from manifest)");

  std::size_t gc_trials = 100;
  std::uint64_t gc_seed = 0;
  bool gc_verbose = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gradcheck->add_option("--trials", gc_trials, "random configurations");
  gradcheck->add_option("--seed", gc_seed, "seed");
  gradcheck->add_flag("-v,--verbose", gc_verbose, "per-trial lines");

  std::string sy_out;
  std::uint64_t sy_seed = 0;
  std::size_t sy_classes = 4, sy_dim = 16, sy_shots = 16, sy_test = 100, sy_anchors = 8;
  auto* synth = app.add_subcommand("synth", "write a synthetic Gaussian-cluster dataset");
  synth->add_option("--out", sy_out, "output directory")->required();
  synth->add_option("--seed", sy_seed, "seed");
  synth->add_option("--classes", sy_classes, "classes");
  synth->add_option("--dim", sy_dim, "feature dimension");
  synth->add_option("--shots", sy_shots, "support examples per class");
  synth->add_option("--test-per-class", sy_test, "test examples per class");
  synth->add_option("--anchors", sy_anchors, "anchor count");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*zero_shot) return run_zero_shot(zs);
    if (*train) return run_train(tr);
    if (*eval) return run_eval(ev_manifest, ev_checkpoint, ev_out, ev_predictions);
    if (*inspect) return run_inspect(in_manifest, in_anchors, in_heatmap, in_balance, in_tau);
    if (*gradcheck) return run_gradcheck(gc_trials, gc_seed, gc_verbose);
    if (*synth) {
      return run_synth(sy_out, sy_seed, sy_classes, sy_dim, sy_shots, sy_test, sy_anchors);
    }
  } catch (const relt::Error& e) {
    std::cerr << "error [" << relt::to_string(e.code()) << "]: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
