#pragma once

#include <cstdint>
#include <filesystem>

#include "relt/embed_io.hpp"

namespace relt {

// Gaussian-cluster stand-in for exported encoder features. Class k has an
// image cluster centred at (separation / sqrt 2) * u_k with unit isotropic
// noise, so any two centres are `separation` sigmas apart; u_k are
// orthonormal. Text-side target features are u_k perturbed by `text_noise`
// (the modality gap that makes the zero-shot classifier imperfect). Anchors
// are unit mixtures of two neighbouring class directions plus noise.
struct SyntheticConfig {
  std::size_t classes = 4;
  std::size_t dim = 16;
  std::size_t shots = 16;
  std::size_t test_per_class = 100;
  std::size_t num_anchors = 8;
  double separation = 4.0;
  double text_noise = 0.6;
  double anchor_noise = 0.3;
  std::uint64_t seed = 0;
};

struct SyntheticDataset {
  EmbeddingMatrix targets;
  EmbeddingMatrix anchors;
  LabeledImageSet support;
  LabeledImageSet test;
};

SyntheticDataset make_synthetic(const SyntheticConfig& config);

// Writes the dataset as RTEB files plus manifest.json (test split as the
// image set, support split as the support set). Returns the manifest path.
std::filesystem::path write_synthetic(const SyntheticDataset& ds, const std::filesystem::path& dir);

}  // namespace relt
