#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "relt/rtm.hpp"

namespace relt {

struct GradcheckOptions {
  std::size_t trials = 100;
  std::uint64_t seed = 0;
  double epsilon = 1e-5;
  // Gradients below this magnitude are compared in absolute terms. At
  // eps = 1e-5 the loss roundoff, amplified by the softmax temperatures and
  // LayerNorm, puts ~1e-9 of noise on each numeric derivative.
  double relative_floor = 1e-4;
  std::size_t max_c_tar = 10;
  std::size_t max_c_anc = 16;
  std::size_t max_dim = 32;
  std::size_t max_batch = 4;
};

struct GradcheckTrial {
  std::size_t c_tar = 0;
  std::size_t c_anc = 0;
  std::size_t dim = 0;
  std::size_t batch = 0;
  LossConfig loss;
  double attn_temperature = 0.0;
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  // Coordinates whose +-eps probes straddle a ReLU or PP-selection boundary.
  std::size_t skipped_kinks = 0;
};

struct GradcheckReport {
  std::vector<GradcheckTrial> trials;
  double max_rel_error = 0.0;
  std::size_t parameters_checked = 0;
  std::size_t skipped_kinks = 0;
};

// |analytic - numeric| / max(|analytic|, |numeric|, floor)
double gradient_relative_error(double analytic, double numeric, double floor);

// Central differences of rtm_loss against rtm_gradients for every parameter
// of a randomly drawn configuration. Coordinates where the probes cross a
// non-differentiable boundary are skipped and counted.
GradcheckTrial check_gradients(const Matrix& features, const std::vector<std::uint32_t>& labels,
                               const RtmParams& params, const Matrix& targets,
                               const LossConfig& loss, double epsilon,
                               double relative_floor);

GradcheckReport run_gradcheck(const GradcheckOptions& options);

}  // namespace relt
