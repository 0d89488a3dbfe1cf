#pragma once

#include <cstdint>
#include <filesystem>
#include <span>

#include "relt/matrix.hpp"

namespace relt {

enum class Normalization { over_anchors, over_targets };

// C_tar x C_anc softmaxed cosine similarities between targets and anchors.
struct RelationMatrix {
  Matrix values;
  Normalization normalization = Normalization::over_anchors;
  double temperature = 0.01;

  std::size_t targets() const { return values.rows(); }
  std::size_t anchors() const { return values.cols(); }
};

// Entry (i, j) = dot(a_i, b_j) clamped to [-1, 1]. Rows are assumed unit norm.
Matrix cosine_matrix(const Matrix& a, const Matrix& b);

// Max-subtracted softmax of values / temperature.
Vector softmax(std::span<const double> values, double temperature);

// Row i is the softmax over anchors of cos(target_i, anchor_j) / tau.
RelationMatrix anchor_target_relation(const Matrix& targets, const Matrix& anchors, double tau);
// Column j is the softmax over targets of cos(target_i, anchor_j) / tau.
RelationMatrix target_normalized_relation(const Matrix& targets, const Matrix& anchors,
                                          double tau);

// Same as above, but from a precomputed cosine matrix (targets x anchors).
RelationMatrix normalize_relation(const Matrix& cosines, Normalization how, double tau);

// Both normalizations built from a single cosine pass; counts as one build.
struct RelationSet {
  RelationMatrix over_anchors;
  RelationMatrix over_targets;
};
RelationSet build_relation_set(const Matrix& targets, const Matrix& anchors, double tau);

// Number of relation constructions since process start. Every call to
// anchor_target_relation, target_normalized_relation, or build_relation_set
// adds exactly one.
std::uint64_t relation_build_count();

Vector image_anchor_relation(std::span<const double> image, const Matrix& anchors, double tau);

// Normalized entropy of the per-target marginal of an over_targets matrix.
double marginal_balance(const RelationMatrix& r);

// Row-major CSV, 9 significant digits.
void write_relation_csv(const RelationMatrix& r, const std::filesystem::path& path);

}  // namespace relt
