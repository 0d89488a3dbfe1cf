#include "relt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "relt/random.hpp"

namespace relt {

namespace {


std::size_t draw_between(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

double log_uniform(Rng& rng, double lo, double hi) {
  return std::exp(rng.uniform(std::log(lo), std::log(hi)));
}

Matrix random_unit_rows(std::size_t rows, std::size_t dim, Rng& rng) {
  Matrix m(rows, dim);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = m.row(r);
    for (double& v : row) v = rng.normal();
    const double n = std::sqrt(dot(row, row));
    for (double& v : row) v /= n;
  }
  return m;
}

}  // namespace

double gradient_relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradcheckTrial check_gradients(const Matrix& features, const std::vector<std::uint32_t>& labels,
                               const RtmParams& params, const Matrix& targets,
                               const LossConfig& loss, double epsilon,
                               double relative_floor) {
  GradcheckTrial trial;
  trial.c_tar = params.c_tar();
  trial.c_anc = params.c_anc();
  trial.dim = params.dim();
  trial.batch = features.rows();
  trial.loss = loss;
  trial.attn_temperature = params.attn_temperature;

  const GradientResult analytic = rtm_gradients(features, labels, params, targets, loss);
  const auto base_pattern = rtm_active_pattern(features, params, targets, loss);
  RtmParams probe = params;
  auto probe_tensors = probe.tensors();
  const auto grad_tensors = analytic.grad.tensors();
  for (std::size_t t = 0; t < RtmParams::kTensorCount; ++t) {
    auto& values = probe_tensors[t]->data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + epsilon;
      const double up = rtm_loss(features, labels, probe, targets, loss);
      const bool up_same = rtm_active_pattern(features, probe, targets, loss) == base_pattern;
      values[i] = saved - epsilon;
      const double down = rtm_loss(features, labels, probe, targets, loss);
      const bool down_same = rtm_active_pattern(features, probe, targets, loss) == base_pattern;
      values[i] = saved;
      if (!up_same || !down_same) {
        ++trial.skipped_kinks;
        continue;
      }
      const double numeric = (up - down) / (2.0 * epsilon);
      const double err =
          gradient_relative_error(grad_tensors[t]->data()[i], numeric, relative_floor);
      if (err > trial.max_rel_error || trial.worst_tensor.empty()) {
        trial.max_rel_error = err;
        trial.worst_tensor = RtmParams::kTensorNames[t];
        trial.worst_index = i;
        trial.worst_analytic = grad_tensors[t]->data()[i];
        trial.worst_numeric = numeric;
      }
    }
  }
  return trial;
}

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
  GradcheckReport report;
  Rng rng(options.seed);
  for (std::size_t trial = 0; trial < options.trials; ++trial) {
    const std::size_t c_tar = draw_between(rng, 2, options.max_c_tar);
    const std::size_t c_anc = draw_between(rng, 1, options.max_c_anc);
    const std::size_t dim = draw_between(rng, 2, options.max_dim);
    const std::size_t batch = draw_between(rng, 1, options.max_batch);

    LossConfig loss;
    loss.tau_rel = log_uniform(rng, 0.1, 1.0);
    loss.clip_scale = log_uniform(rng, 1.0, 10.0);
    loss.alpha = rng.uniform(0.5, 2.0);
    loss.gamma = (c_tar >= 4 && rng.uniform() < 0.5) ? rng.uniform(0.1, 1.0) : 0.0;

    const Matrix targets = random_unit_rows(c_tar, dim, rng);
    const Matrix features = random_unit_rows(batch, dim, rng);
    std::vector<std::uint32_t> labels(batch);
    for (auto& l : labels) l = static_cast<std::uint32_t>(rng.below(c_tar));

    RtmParams params = rtm_init(c_tar, c_anc, dim, ProjectionInit::identity, AnchorInit{},
                                rng.below(1u << 30), log_uniform(rng, 0.1, 1.0));
    // Move every tensor off its structured initial value so each path carries gradient.
    const double proj_std = 0.3 / std::sqrt(static_cast<double>(dim));
    for (double& v : params.w_q.data()) v += proj_std * rng.normal();
    for (double& v : params.w_k.data()) v += proj_std * rng.normal();
    for (double& v : params.ffn_w1.data()) v = rng.normal() / std::sqrt(static_cast<double>(c_tar));
    for (double& v : params.ffn_b1.data()) v = 0.5 * rng.normal();
    for (double& v : params.ffn_w2.data()) v = 0.3 * rng.normal();
    for (double& v : params.ffn_b2.data()) v = 0.1 * rng.normal();
    for (double& v : params.ln_gain.data()) v = 1.0 + 0.2 * rng.normal();
    for (double& v : params.ln_bias.data()) v = 0.1 * rng.normal();

    auto result = check_gradients(features, labels, params, targets, loss, options.epsilon,
                                  options.relative_floor);
    report.parameters_checked += params.parameter_count() - result.skipped_kinks;
    report.skipped_kinks += result.skipped_kinks;
    report.max_rel_error = std::max(report.max_rel_error, result.max_rel_error);
    report.trials.push_back(std::move(result));
  }
  return report;
}

}  // namespace relt
