#include "relt/relation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>

#include "relt/error.hpp"

namespace relt {

namespace {

std::atomic<std::uint64_t> g_relation_builds{0};

void check_temperature(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw Error(Errc::invalid_argument, "temperature must be positive, got " + std::to_string(tau));
  }
}

}  // namespace

Matrix cosine_matrix(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw Error(Errc::dimension_mismatch, "cosine_matrix: dimension mismatch (" +
                                              std::to_string(a.cols()) + " vs " +
                                              std::to_string(b.cols()) + ")");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      out(i, j) = std::clamp(dot(a.row(i), b.row(j)), -1.0, 1.0);
    }
  }
  return out;
}

Vector softmax(std::span<const double> values, double temperature) {
  check_temperature(temperature);
  if (values.empty()) throw Error(Errc::invalid_argument, "softmax of empty input");
  double max_v = -std::numeric_limits<double>::infinity();
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(Errc::non_finite, "softmax: non-finite input");
    max_v = std::max(max_v, v);
  }
  Vector out(values.size());
  double total = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = std::exp((values[i] - max_v) / temperature);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

RelationMatrix normalize_relation(const Matrix& cosines, Normalization how, double tau) {
  check_temperature(tau);
  RelationMatrix r{Matrix(cosines.rows(), cosines.cols()), how, tau};
  if (how == Normalization::over_anchors) {
    for (std::size_t i = 0; i < cosines.rows(); ++i) {
      const Vector p = softmax(cosines.row(i), tau);
      std::copy(p.begin(), p.end(), r.values.row(i).begin());
    }
  } else {
    Vector column(cosines.rows());
    for (std::size_t j = 0; j < cosines.cols(); ++j) {
      for (std::size_t i = 0; i < cosines.rows(); ++i) column[i] = cosines(i, j);
      const Vector p = softmax(column, tau);
      for (std::size_t i = 0; i < cosines.rows(); ++i) r.values(i, j) = p[i];
    }
  }
  return r;
}

RelationMatrix anchor_target_relation(const Matrix& targets, const Matrix& anchors, double tau) {
  ++g_relation_builds;
  return normalize_relation(cosine_matrix(targets, anchors), Normalization::over_anchors, tau);
}

RelationMatrix target_normalized_relation(const Matrix& targets, const Matrix& anchors,
                                          double tau) {
  ++g_relation_builds;
  return normalize_relation(cosine_matrix(targets, anchors), Normalization::over_targets, tau);
}

RelationSet build_relation_set(const Matrix& targets, const Matrix& anchors, double tau) {
  ++g_relation_builds;
  const Matrix cos = cosine_matrix(targets, anchors);
  return {normalize_relation(cos, Normalization::over_anchors, tau),
          normalize_relation(cos, Normalization::over_targets, tau)};
}

std::uint64_t relation_build_count() { return g_relation_builds.load(); }

Vector image_anchor_relation(std::span<const double> image, const Matrix& anchors, double tau) {
  if (image.size() != anchors.cols()) {
    throw Error(Errc::dimension_mismatch, "image_anchor_relation: dimension mismatch");
  }
  Vector cos(anchors.rows());
  for (std::size_t j = 0; j < anchors.rows(); ++j) {
    cos[j] = std::clamp(dot(image, anchors.row(j)), -1.0, 1.0);
  }
  return softmax(cos, tau);
}

double marginal_balance(const RelationMatrix& r) {
  if (r.normalization != Normalization::over_targets) {
    throw Error(Errc::wrong_normalization, "marginal_balance needs an over_targets matrix");
  }
  const std::size_t c_tar = r.targets();
  const std::size_t c_anc = r.anchors();
  if (c_tar == 1) return 1.0;
  double entropy = 0.0;
  for (std::size_t i = 0; i < c_tar; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < c_anc; ++j) m += r.values(i, j);
    m /= static_cast<double>(c_anc);
    if (m > 0.0) entropy -= m * std::log(m);
  }
  return std::clamp(entropy / std::log(static_cast<double>(c_tar)), 0.0, 1.0);
}

void write_relation_csv(const RelationMatrix& r, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::io_failure, "cannot write " + path.string());
  char buf[32];
  for (std::size_t i = 0; i < r.values.rows(); ++i) {
    for (std::size_t j = 0; j < r.values.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", r.values(i, j));
      if (j) out << ',';
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace relt
