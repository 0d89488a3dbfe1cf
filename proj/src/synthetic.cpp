#include "relt/synthetic.hpp"

#include <cmath>

#include "relt/error.hpp"
#include "relt/random.hpp"

namespace relt {

namespace {

void normalize_row(std::span<double> row) {
  const double n = std::sqrt(dot(row, row));
  for (double& v : row) v /= n;
}

Matrix orthonormal_rows(std::size_t count, std::size_t dim, Rng& rng) {
  Matrix u(count, dim);
  for (std::size_t k = 0; k < count; ++k) {
    auto row = u.row(k);
    for (double& v : row) v = rng.normal();
    for (std::size_t p = 0; p < k; ++p) {
      const double proj = dot(row, u.row(p));
      const auto prev = u.row(p);
      for (std::size_t d = 0; d < dim; ++d) row[d] -= proj * prev[d];
    }
    normalize_row(row);
  }
  return u;
}

LabeledImageSet draw_images(const Matrix& centers, std::size_t per_class, Rng& rng) {
  const std::size_t classes = centers.rows();
  const std::size_t dim = centers.cols();
  Matrix x(classes * per_class, dim);
  LabeledImageSet set;
  set.class_count = static_cast<std::uint32_t>(classes);
  // Interleave classes so prefixes stay balanced.
  for (std::size_t n = 0; n < per_class; ++n) {
    for (std::size_t k = 0; k < classes; ++k) {
      auto row = x.row(n * classes + k);
      for (std::size_t d = 0; d < dim; ++d) row[d] = centers(k, d) + rng.normal();
      normalize_row(row);
      set.labels.push_back(static_cast<std::uint32_t>(k));
    }
  }
  set.features = EmbeddingMatrix::from_matrix(x);
  set.features.normalized = rows_unit_norm(set.features);
  return set;
}

}  // namespace

SyntheticDataset make_synthetic(const SyntheticConfig& config) {
  if (config.classes == 0 || config.dim < config.classes || config.num_anchors == 0) {
    throw Error(Errc::invalid_argument, "synthetic: need dim >= classes >= 1 and anchors >= 1");
  }
  Rng rng(config.seed);
  const Matrix u = orthonormal_rows(config.classes, config.dim, rng);
  const double radius = config.separation / std::sqrt(2.0);
  Matrix centers = u;
  for (double& v : centers.data()) v *= radius;

  const double per_coord = 1.0 / std::sqrt(static_cast<double>(config.dim));
  Matrix text = u;
  for (double& v : text.data()) v += config.text_noise * per_coord * rng.normal();
  for (std::size_t k = 0; k < text.rows(); ++k) normalize_row(text.row(k));

  Matrix anchors(config.num_anchors, config.dim);
  for (std::size_t a = 0; a < config.num_anchors; ++a) {
    const std::size_t first = a % config.classes;
    const std::size_t second = (a + 1 + a / config.classes) % config.classes;
    const double w = 0.55 + 0.4 * rng.uniform();
    auto row = anchors.row(a);
    for (std::size_t d = 0; d < config.dim; ++d) {
      row[d] = w * u(first, d) + (1.0 - w) * u(second, d) +
               config.anchor_noise * per_coord * rng.normal();
    }
    normalize_row(row);
  }

  SyntheticDataset ds;
  ds.targets = EmbeddingMatrix::from_matrix(text);
  ds.anchors = EmbeddingMatrix::from_matrix(anchors);
  ds.support = draw_images(centers, config.shots, rng);
  ds.test = draw_images(centers, config.test_per_class, rng);
  return ds;
}

std::filesystem::path write_synthetic(const SyntheticDataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(Errc::io_failure, "cannot create " + dir.string());
  save_embeddings(ds.targets, dir / "targets.rteb");
  save_embeddings(ds.anchors, dir / "anchors.rteb");
  save_embeddings(ds.test.features, dir / "images.rteb");
  save_labels(ds.test.labels, dir / "labels.txt");
  save_embeddings(ds.support.features, dir / "support_images.rteb");
  save_labels(ds.support.labels, dir / "support_labels.txt");
  std::vector<std::string> names;
  for (std::size_t k = 0; k < ds.targets.rows; ++k) names.push_back("class_" + std::to_string(k));
  save_class_names(names, dir / "class_names.txt");
  DatasetManifest m;
  m.targets = "targets.rteb";
  m.anchors = fs::path("anchors.rteb");
  m.images = "images.rteb";
  m.labels = "labels.txt";
  m.class_names = fs::path("class_names.txt");
  m.support_images = fs::path("support_images.rteb");
  m.support_labels = fs::path("support_labels.txt");
  m.backbone = "synthetic";
  save_manifest(m, dir / "manifest.json");
  return dir / "manifest.json";
}

}  // namespace relt
