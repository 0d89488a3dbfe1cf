#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "relt/matrix.hpp"
#include "relt/relation.hpp"

namespace relt {

// -log softmax(logits)[label], max-subtracted.
double cross_entropy(std::span<const double> logits, std::size_t label);

// Also writes d(loss)/d(logits) = softmax(logits) - onehot(label) into grad.
double cross_entropy(std::span<const double> logits, std::size_t label, std::span<double> grad);

struct Cluster {
  std::vector<std::size_t> indices;  // positions in the input sequence
  std::vector<double> values;        // ascending
  double mean = 0.0;
};

struct KMeans1d {
  std::vector<Cluster> clusters;  // ascending by mean
  double cost = 0.0;              // within-cluster sum of squares
};

// Exact 1-D k-means: optimal clusters are contiguous runs of the sorted values,
// so a DP over split points finds the global optimum. Equal values never get
// split; if there are fewer than k distinct values, fewer clusters come back.
KMeans1d kmeans_1d(std::span<const double> values, std::size_t k = 3);

struct PpLossReport {
  double l_ke = 0.0;
  double l_eh = 0.0;
  double l_he = 0.0;
  double total = 0.0;
  // Size of the highest-mean cluster for each anchor column.
  std::vector<std::size_t> top_cluster_sizes;
};

// Prototypes prior loss over a column-stochastic relation matrix (C_tar >= 4).
// When grad is non-null it receives d(total)/d(P) with the cluster assignment
// and top-3 selection held fixed.
PpLossReport pp_loss(const RelationMatrix& p, Matrix* grad = nullptr);

// Pseudo-label used by the one-hot penalty: 0.3 on the column's three largest
// entries (ties to the lower index), 0.1 / (C_tar - 3) elsewhere.
Vector pp_pseudo_label(std::span<const double> column);

}  // namespace relt
