#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "relt/matrix.hpp"

namespace relt {

// rows x dim block of 32-bit floats, the on-disk representation of encoder
// features. `normalized` is only set when every row norm is within 1e-5 of 1.
struct EmbeddingMatrix {
  std::uint32_t rows = 0;
  std::uint32_t dim = 0;
  std::vector<float> data;
  bool normalized = false;

  float at(std::size_t r, std::size_t c) const { return data[r * dim + c]; }

  // Widens to 64-bit for the numerical core.
  Matrix to_matrix() const;
  static EmbeddingMatrix from_matrix(const Matrix& m);

  friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;
};

inline constexpr double kNormTolerance = 1e-5;
inline constexpr std::uint32_t kRtebVersion = 1;
inline constexpr std::size_t kRtebHeaderBytes = 16;

// True when every row norm is within kNormTolerance of 1.
bool rows_unit_norm(const EmbeddingMatrix& m);

EmbeddingMatrix load_embeddings(const std::filesystem::path& path);
void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);

// Serialized RTEB bytes; save_embeddings writes exactly this.
std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& m);
EmbeddingMatrix decode_embeddings(const std::vector<std::uint8_t>& bytes);

EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m);

struct LabeledImageSet {
  EmbeddingMatrix features;
  std::vector<std::uint32_t> labels;
  std::uint32_t class_count = 0;

  std::size_t size() const { return labels.size(); }
  // Throws when labels and features disagree or a label is out of range.
  void check() const;
};

std::vector<std::uint32_t> load_labels(const std::filesystem::path& path);
void save_labels(const std::vector<std::uint32_t>& labels, const std::filesystem::path& path);
std::vector<std::string> load_class_names(const std::filesystem::path& path);
void save_class_names(const std::vector<std::string>& names, const std::filesystem::path& path);

struct DatasetManifest {
  std::filesystem::path targets;
  std::optional<std::filesystem::path> anchors;
  std::filesystem::path images;
  std::filesystem::path labels;
  std::optional<std::filesystem::path> class_names;
  // Optional labeled pool for the image-image branch and few-shot sampling.
  std::optional<std::filesystem::path> support_images;
  std::optional<std::filesystem::path> support_labels;
  double tau = 0.01;
  double tau_prime = 0.01;
  double alpha = 1.0;
  std::string backbone;
};

// Relative paths inside the JSON resolve against the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

struct ValidatedBundle {
  EmbeddingMatrix targets;
  std::optional<EmbeddingMatrix> anchors;
  LabeledImageSet images;
  std::optional<LabeledImageSet> support;
  std::vector<std::string> class_names;
  DatasetManifest manifest;
  // Non-fatal findings, e.g. matrices that had to be normalized on load.
  std::vector<std::string> warnings;
};

ValidatedBundle validate_manifest(const DatasetManifest& manifest);

}  // namespace relt
