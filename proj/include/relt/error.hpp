#pragma once

#include <stdexcept>
#include <string>

namespace relt {

enum class Errc {
  bad_magic,
  version_mismatch,
  truncated,
  non_finite,
  zero_norm,
  dimension_mismatch,
  missing_file,
  label_out_of_range,
  invalid_argument,
  io_failure,
  wrong_normalization,
  parse_error,
  divergence,
};

const char* to_string(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace relt
