#pragma once

#include <cstdint>
#include <filesystem>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gtr {

/// Base class for all library errors. Subtypes map to CLI exit codes:
/// DataError -> 1, ConfigError -> 2.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (files, schemas, layouts).
struct DataError : Error {
  using Error::Error;
};

/// Invalid configuration: bad flags, shape mismatches between config and
/// checkpoint, unusable parameter combinations.
struct ConfigError : Error {
  using Error::Error;
};

/// Operand shapes incompatible with the requested operation.
struct DimensionError : ConfigError {
  using ConfigError::ConfigError;
};

/// Non-finite values where the computation requires finite ones.
struct NumericError : Error {
  using Error::Error;
};

template <typename... Parts>
std::string str_cat(const Parts&... parts) {
  std::ostringstream os;
  (os << ... << parts);
  return os.str();
}

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// splitmix64 core. The standard <random> distributions are implementation
// defined, which would break byte-identical runs across toolchains, so all
// sampling goes through this generator.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1), 53-bit resolution.
  double next_unit() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  /// Unbiased uniform integer in [0, n). n must be > 0.
  std::size_t next_below(std::size_t n) {
    const std::uint64_t bound = n;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }

  /// Independent substream; stable under reordering of unrelated draws.
  Rng fork(std::uint64_t stream) const {
    Rng child(state_ ^ (0xa0761d6478bd642fULL * (stream + 1)));
    child.next_u64();
    return child;
  }

 private:
  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Tokenization
//
// Lowercased ASCII, split at whitespace/punctuation boundaries. Bytes >= 0x80
// (UTF-8 lead/continuation) count as word characters so multi-byte letters
// are kept intact rather than split per byte. Digits are kept as tokens.
// ---------------------------------------------------------------------------

inline bool is_token_byte(unsigned char c) {
  return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') ||
         (c >= 'A' && c <= 'Z') || c >= 0x80;
}

inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : text) {
    if (is_token_byte(c)) {
      if (c >= 'A' && c <= 'Z') c = static_cast<unsigned char>(c - 'A' + 'a');
      cur.push_back(static_cast<char>(c));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

inline std::string join(const std::vector<std::string>& parts,
                        std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

}  // namespace gtr
