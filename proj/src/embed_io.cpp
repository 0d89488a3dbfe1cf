#include "relt/embed_io.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "relt/error.hpp"

namespace relt {

namespace fs = std::filesystem;

const char* to_string(Errc code) {
  switch (code) {
    case Errc::bad_magic: return "bad_magic";
    case Errc::version_mismatch: return "version_mismatch";
    case Errc::truncated: return "truncated";
    case Errc::non_finite: return "non_finite";
    case Errc::zero_norm: return "zero_norm";
    case Errc::dimension_mismatch: return "dimension_mismatch";
    case Errc::missing_file: return "missing_file";
    case Errc::label_out_of_range: return "label_out_of_range";
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::io_failure: return "io_failure";
    case Errc::wrong_normalization: return "wrong_normalization";
    case Errc::parse_error: return "parse_error";
    case Errc::divergence: return "divergence";
  }
  return "unknown";
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFFu));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFFu));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xFFu));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xFFu));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t offset) {
  return static_cast<std::uint32_t>(in[offset]) |
         (static_cast<std::uint32_t>(in[offset + 1]) << 8) |
         (static_cast<std::uint32_t>(in[offset + 2]) << 16) |
         (static_cast<std::uint32_t>(in[offset + 3]) << 24);
}

double row_norm(const EmbeddingMatrix& m, std::size_t r) {
  double s = 0.0;
  for (std::size_t c = 0; c < m.dim; ++c) {
    const double v = m.at(r, c);
    s += v * v;
  }
  return std::sqrt(s);
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::missing_file, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::ofstream open_for_write(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw Error(Errc::io_failure, "cannot write " + path.string());
  return out;
}

}  // namespace

Matrix EmbeddingMatrix::to_matrix() const {
  Matrix m(rows, dim);
  for (std::size_t i = 0; i < data.size(); ++i) m.data()[i] = data[i];
  return m;
}

EmbeddingMatrix EmbeddingMatrix::from_matrix(const Matrix& m) {
  EmbeddingMatrix e;
  e.rows = static_cast<std::uint32_t>(m.rows());
  e.dim = static_cast<std::uint32_t>(m.cols());
  e.data.resize(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) e.data[i] = static_cast<float>(m.data()[i]);
  e.normalized = rows_unit_norm(e);
  return e;
}

bool rows_unit_norm(const EmbeddingMatrix& m) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    if (std::abs(row_norm(m, r) - 1.0) > kNormTolerance) return false;
  }
  return m.rows > 0;
}

std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& m) {
  if (m.rows == 0 || m.dim == 0) {
    throw Error(Errc::invalid_argument, "embedding matrix must have rows >= 1 and dim >= 1");
  }
  if (m.data.size() != static_cast<std::size_t>(m.rows) * m.dim) {
    throw Error(Errc::invalid_argument, "embedding matrix data size does not match rows*dim");
  }
  std::vector<std::uint8_t> out;
  out.reserve(kRtebHeaderBytes + 4 * m.data.size());
  out.insert(out.end(), {'R', 'T', 'E', 'B'});
  put_u32(out, kRtebVersion);
  put_u32(out, m.rows);
  put_u32(out, m.dim);
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    if (!std::isfinite(m.data[i])) {
      throw Error(Errc::non_finite, "non-finite value, row " + std::to_string(i / m.dim));
    }
    put_u32(out, std::bit_cast<std::uint32_t>(m.data[i]));
  }
  return out;
}

EmbeddingMatrix decode_embeddings(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kRtebHeaderBytes) {
    throw Error(Errc::truncated, "truncated header: " + std::to_string(bytes.size()) +
                                     " bytes, need 16 (offset " + std::to_string(bytes.size()) + ")");
  }
  if (!(bytes[0] == 'R' && bytes[1] == 'T' && bytes[2] == 'E' && bytes[3] == 'B')) {
    throw Error(Errc::bad_magic, "bad magic at byte offset 0, expected \"RTEB\"");
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kRtebVersion) {
    throw Error(Errc::version_mismatch, "unsupported version " + std::to_string(version) +
                                            " at byte offset 4");
  }
  EmbeddingMatrix m;
  m.rows = get_u32(bytes, 8);
  m.dim = get_u32(bytes, 12);
  if (m.rows == 0 || m.dim == 0) {
    throw Error(Errc::invalid_argument, "header declares an empty matrix (byte offset 8)");
  }
  const std::size_t count = static_cast<std::size_t>(m.rows) * m.dim;
  const std::size_t expected = kRtebHeaderBytes + 4 * count;
  if (bytes.size() < expected) {
    throw Error(Errc::truncated, "truncated payload: file ends at byte offset " +
                                     std::to_string(bytes.size()) + ", expected " +
                                     std::to_string(expected) + " bytes");
  }
  if (bytes.size() > expected) {
    throw Error(Errc::parse_error,
                "trailing bytes after payload at byte offset " + std::to_string(expected));
  }
  m.data.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t offset = kRtebHeaderBytes + 4 * i;
    const float v = std::bit_cast<float>(get_u32(bytes, offset));
    if (!std::isfinite(v)) {
      throw Error(Errc::non_finite, "non-finite value, row " + std::to_string(i / m.dim) +
                                        " (byte offset " + std::to_string(offset) + ")");
    }
    m.data[i] = v;
  }
  m.normalized = rows_unit_norm(m);
  return m;
}

EmbeddingMatrix load_embeddings(const fs::path& path) {
  try {
    return decode_embeddings(read_file(path));
  } catch (const Error& e) {
    if (e.code() == Errc::missing_file) throw;
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

void save_embeddings(const EmbeddingMatrix& m, const fs::path& path) {
  const auto bytes = encode_embeddings(m);
  auto out = open_for_write(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::io_failure, "write failed for " + path.string());
}

EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m) {
  EmbeddingMatrix out = m;
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double n = row_norm(m, r);
    if (n == 0.0) throw Error(Errc::zero_norm, "zero-norm row " + std::to_string(r));
    for (std::size_t c = 0; c < m.dim; ++c) {
      out.data[r * m.dim + c] = static_cast<float>(m.at(r, c) / n);
    }
  }
  out.normalized = true;
  return out;
}

void LabeledImageSet::check() const {
  if (labels.size() != features.rows) {
    throw Error(Errc::dimension_mismatch, "labels length " + std::to_string(labels.size()) +
                                              " != feature rows " +
                                              std::to_string(features.rows));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= class_count) {
      throw Error(Errc::label_out_of_range,
                  "label out of range: value " + std::to_string(labels[i]) + " at line " +
                      std::to_string(i + 1) + " with class_count " +
                      std::to_string(class_count));
    }
  }
}

std::vector<std::uint32_t> load_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, "cannot open labels file " + path.string());
  std::vector<std::uint32_t> labels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(line, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != line.size() || v < 0) {
      throw Error(Errc::parse_error,
                  path.string() + ": bad label '" + line + "' at line " + std::to_string(lineno));
    }
    labels.push_back(static_cast<std::uint32_t>(v));
  }
  return labels;
}

void save_labels(const std::vector<std::uint32_t>& labels, const fs::path& path) {
  auto out = open_for_write(path);
  for (auto l : labels) out << l << '\n';
}

std::vector<std::string> load_class_names(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, "cannot open class-names file " + path.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    names.push_back(line);
  }
  return names;
}

void save_class_names(const std::vector<std::string>& names, const fs::path& path) {
  auto out = open_for_write(path);
  for (const auto& n : names) out << n << '\n';
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, "cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse_error, "manifest " + path.string() + ": " + e.what());
  }
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    fs::path candidate(p);
    return candidate.is_absolute() ? candidate : base / candidate;
  };
  auto required = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_string()) {
      throw Error(Errc::parse_error, "manifest missing string key '" + std::string(key) + "'");
    }
    return resolve(j[key].get<std::string>());
  };
  auto optional_path = [&](const char* key) -> std::optional<fs::path> {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return resolve(j[key].get<std::string>());
  };

  DatasetManifest m;
  try {
    m.targets = required("targets");
    m.images = required("images");
    m.labels = required("labels");
    m.anchors = optional_path("anchors");
    m.class_names = optional_path("class_names");
    m.support_images = optional_path("support_images");
    m.support_labels = optional_path("support_labels");
    m.tau = j.value("tau", m.tau);
    m.tau_prime = j.value("tau_prime", m.tau_prime);
    m.alpha = j.value("alpha", m.alpha);
    m.backbone = j.value("backbone", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse_error, "manifest " + path.string() + ": " + e.what());
  }
  if (m.support_images.has_value() != m.support_labels.has_value()) {
    throw Error(Errc::parse_error, "manifest: support_images and support_labels go together");
  }
  if (!(m.tau > 0.0) || !(m.tau_prime > 0.0) || !(m.alpha >= 0.0)) {
    throw Error(Errc::invalid_argument, "manifest: tau, tau_prime must be > 0 and alpha >= 0");
  }
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  nlohmann::ordered_json j;
  j["targets"] = m.targets.string();
  j["anchors"] = m.anchors ? nlohmann::ordered_json(m.anchors->string()) : nlohmann::ordered_json();
  j["images"] = m.images.string();
  j["labels"] = m.labels.string();
  j["class_names"] =
      m.class_names ? nlohmann::ordered_json(m.class_names->string()) : nlohmann::ordered_json();
  if (m.support_images) {
    j["support_images"] = m.support_images->string();
    j["support_labels"] = m.support_labels->string();
  }
  j["tau"] = m.tau;
  j["tau_prime"] = m.tau_prime;
  j["alpha"] = m.alpha;
  j["backbone"] = m.backbone;
  auto out = open_for_write(path);
  out << j.dump(2) << '\n';
}

namespace {

EmbeddingMatrix load_normalized(const fs::path& path, const char* role,
                                std::vector<std::string>& warnings) {
  if (!fs::exists(path)) {
    throw Error(Errc::missing_file, std::string("missing ") + role + " file " + path.string());
  }
  auto m = load_embeddings(path);
  if (!m.normalized) {
    warnings.push_back(std::string(role) + " features were not unit-norm; normalized on load");
    m = l2_normalize(m);
  }
  return m;
}

void require_same_dim(const EmbeddingMatrix& a, const char* a_name, const EmbeddingMatrix& b,
                      const char* b_name) {
  if (a.dim != b.dim) {
    throw Error(Errc::dimension_mismatch, std::string("dimension mismatch ") + a_name + "/" +
                                              b_name + " (" + std::to_string(a.dim) + " vs " +
                                              std::to_string(b.dim) + ")");
  }
}

}  // namespace

ValidatedBundle validate_manifest(const DatasetManifest& manifest) {
  ValidatedBundle b;
  b.manifest = manifest;
  b.targets = load_normalized(manifest.targets, "targets", b.warnings);
  if (manifest.anchors) {
    b.anchors = load_normalized(*manifest.anchors, "anchors", b.warnings);
    require_same_dim(b.targets, "targets", *b.anchors, "anchors");
  }
  b.images.features = load_normalized(manifest.images, "images", b.warnings);
  require_same_dim(b.targets, "targets", b.images.features, "images");
  if (!fs::exists(manifest.labels)) {
    throw Error(Errc::missing_file, "missing labels file " + manifest.labels.string());
  }
  b.images.labels = load_labels(manifest.labels);
  b.images.class_count = b.targets.rows;
  b.images.check();

  if (manifest.support_images) {
    LabeledImageSet s;
    s.features = load_normalized(*manifest.support_images, "support images", b.warnings);
    require_same_dim(b.targets, "targets", s.features, "support images");
    if (!fs::exists(*manifest.support_labels)) {
      throw Error(Errc::missing_file,
                  "missing support labels file " + manifest.support_labels->string());
    }
    s.labels = load_labels(*manifest.support_labels);
    s.class_count = b.targets.rows;
    s.check();
    b.support = std::move(s);
  }

  if (manifest.class_names) {
    if (!fs::exists(*manifest.class_names)) {
      throw Error(Errc::missing_file, "missing class-names file " + manifest.class_names->string());
    }
    b.class_names = load_class_names(*manifest.class_names);
    if (b.class_names.size() != b.targets.rows) {
      throw Error(Errc::dimension_mismatch,
                  "class_names lists " + std::to_string(b.class_names.size()) +
                      " names but targets has " + std::to_string(b.targets.rows) + " rows");
    }
  }
  return b;
}

}  // namespace relt
