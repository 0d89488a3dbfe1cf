#include "relt/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "relt/error.hpp"

namespace relt {

double cross_entropy(std::span<const double> logits, std::size_t label, std::span<double> grad) {
  if (label >= logits.size()) {
    throw Error(Errc::label_out_of_range, "cross_entropy: label " + std::to_string(label) +
                                              " out of range for " +
                                              std::to_string(logits.size()) + " classes");
  }
  std::size_t top = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) throw Error(Errc::non_finite, "cross_entropy: non-finite logits");
    if (logits[i] > logits[top]) top = i;
  }
  const double max_v = logits[top];
  // log-sum-exp as max + log1p(rest) so a confident correct prediction keeps
  // its tiny loss instead of rounding to zero.
  double rest = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (i != top) rest += std::exp(logits[i] - max_v);
  }
  const double log1p_rest = std::log1p(rest);
  if (!grad.empty()) {
    for (std::size_t i = 0; i < logits.size(); ++i) {
      grad[i] = std::exp(logits[i] - max_v - log1p_rest);
    }
    grad[label] = label == top ? -rest / (1.0 + rest) : grad[label] - 1.0;
  }
  return (max_v - logits[label]) + log1p_rest;
}

double cross_entropy(std::span<const double> logits, std::size_t label) {
  return cross_entropy(logits, label, std::span<double>{});
}

KMeans1d kmeans_1d(std::span<const double> values, std::size_t k) {
  const std::size_t n = values.size();
  if (k == 0) throw Error(Errc::invalid_argument, "kmeans_1d: k must be positive");
  if (n < k) {
    throw Error(Errc::invalid_argument, "kmeans_1d: " + std::to_string(n) +
                                            " values is fewer than k=" + std::to_string(k));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = values[order[i]];

  // Split points are only allowed between distinct values.
  std::vector<bool> can_start(n, false);
  std::size_t distinct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i == 0 || x[i] != x[i - 1]) {
      can_start[i] = true;
      ++distinct;
    }
  }
  const std::size_t clusters = std::min(k, distinct);

  // Prefix sums on centered values keep the segment-cost cancellation small.
  const double shift = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  std::vector<double> s1(n + 1, 0.0), s2(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i] - shift;
    s1[i + 1] = s1[i] + v;
    s2[i + 1] = s2[i] + v * v;
  }
  auto segment_cost = [&](std::size_t l, std::size_t r) {  // [l, r)
    const double len = static_cast<double>(r - l);
    const double a = s1[r] - s1[l];
    return std::max(0.0, (s2[r] - s2[l]) - a * a / len);
  };

  constexpr double kInf = std::numeric_limits<double>::infinity();
  // best[m][r]: min cost of the first r sorted values in m clusters.
  std::vector<std::vector<double>> best(clusters + 1, std::vector<double>(n + 1, kInf));
  std::vector<std::vector<std::size_t>> split(clusters + 1, std::vector<std::size_t>(n + 1, 0));
  best[0][0] = 0.0;
  for (std::size_t m = 1; m <= clusters; ++m) {
    for (std::size_t r = 1; r <= n; ++r) {
      if (r < n && !can_start[r]) continue;  // a cluster cannot end inside a run of ties
      for (std::size_t l = m - 1; l < r; ++l) {
        if (!can_start[l] || best[m - 1][l] == kInf) continue;
        const double c = best[m - 1][l] + segment_cost(l, r);
        if (c < best[m][r]) {
          best[m][r] = c;
          split[m][r] = l;
        }
      }
    }
  }

  KMeans1d out;
  out.clusters.resize(clusters);
  std::size_t r = n;
  for (std::size_t m = clusters; m >= 1; --m) {
    const std::size_t l = split[m][r];
    Cluster& c = out.clusters[m - 1];
    double sum = 0.0;
    for (std::size_t i = l; i < r; ++i) {
      c.indices.push_back(order[i]);
      c.values.push_back(x[i]);
      sum += x[i];
    }
    c.mean = sum / static_cast<double>(r - l);
    r = l;
  }
  for (const auto& c : out.clusters) {
    for (double v : c.values) out.cost += (v - c.mean) * (v - c.mean);
  }
  return out;
}

Vector pp_pseudo_label(std::span<const double> column) {
  const std::size_t n = column.size();
  if (n < 4) throw Error(Errc::invalid_argument, "pp pseudo-label needs at least 4 targets");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return column[a] > column[b]; });
  Vector q(n, 0.1 / static_cast<double>(n - 3));
  for (std::size_t t = 0; t < 3; ++t) q[order[t]] = 0.3;
  return q;
}

PpLossReport pp_loss(const RelationMatrix& p, Matrix* grad) {
  if (p.normalization != Normalization::over_targets) {
    throw Error(Errc::wrong_normalization, "pp_loss needs an over_targets matrix");
  }
  const std::size_t c_tar = p.targets();
  const std::size_t c_anc = p.anchors();
  if (c_tar < 4) {
    throw Error(Errc::invalid_argument,
                "pp_loss needs at least 4 target classes, got " + std::to_string(c_tar));
  }
  const double inv_anc = 1.0 / static_cast<double>(c_anc);
  if (grad) *grad = Matrix(c_tar, c_anc);

  PpLossReport rep;
  rep.top_cluster_sizes.reserve(c_anc);
  Vector column(c_tar);
  Vector marginal(c_tar, 0.0);
  for (std::size_t j = 0; j < c_anc; ++j) {
    for (std::size_t i = 0; i < c_tar; ++i) {
      column[i] = p.values(i, j);
      if (!(column[i] > 0.0)) {
        throw Error(Errc::invalid_argument, "pp_loss: relation entries must be positive");
      }
      marginal[i] += column[i] * inv_anc;
    }
    const auto km = kmeans_1d(column, 3);
    const std::size_t top = km.clusters.back().indices.size();
    rep.top_cluster_sizes.push_back(top);

    if (top == 1) {
      const Vector q = pp_pseudo_label(column);
      double kl = 0.0;
      for (std::size_t i = 0; i < c_tar; ++i) {
        kl += column[i] * std::log(column[i] / q[i]);
        if (grad) (*grad)(i, j) += inv_anc * (std::log(column[i] / q[i]) + 1.0);
      }
      rep.l_ke += inv_anc * kl;
    }

    double entropy = 0.0;
    for (std::size_t i = 0; i < c_tar; ++i) {
      entropy -= column[i] * std::log(column[i]);
      if (grad) (*grad)(i, j) -= inv_anc * (std::log(column[i]) + 1.0);
    }
    rep.l_eh += inv_anc * entropy;
  }
  for (std::size_t i = 0; i < c_tar; ++i) {
    rep.l_he += marginal[i] * std::log(marginal[i]);
    if (grad) {
      const double g = inv_anc * (std::log(marginal[i]) + 1.0);
      for (std::size_t j = 0; j < c_anc; ++j) (*grad)(i, j) += g;
    }
  }
  rep.total = rep.l_ke + rep.l_eh + rep.l_he;
  return rep;
}

}  // namespace relt
