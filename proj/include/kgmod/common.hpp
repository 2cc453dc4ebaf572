#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace kgmod {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operation preconditions violated (shape mismatch, empty input, bad range).
struct ShapeError : Error {
  using Error::Error;
};

// Malformed or truncated files and records.
struct FormatError : Error {
  using Error::Error;
};

// Missing key: qid, title, vocab entry.
struct LookupError : Error {
  using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
  using Error::Error;
};

// Invalid run configuration.
struct ConfigError : Error {
  using Error::Error;
};

inline bool is_finite(double v) { return std::isfinite(v); }

}  // namespace kgmod
