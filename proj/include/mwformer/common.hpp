#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mwf {

using Shape = std::vector<std::size_t>;

// ---------------------------------------------------------------------------
// Error taxonomy. Everything thrown by the library derives from Error so
// callers can catch one base; the concrete type encodes the contract that
// was violated.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or axis mismatch between tensors.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An operation was called outside its stated preconditions.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A model or run configuration is internally inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A forward op produced NaN/Inf, or a computation degenerated numerically.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A degradation class was requested that no bank/registry entry covers.
class AbsentClassError : public Error {
 public:
  using Error::Error;
};

/// Expert routing failed for an identified class.
class RoutingError : public Error {
 public:
  using Error::Error;
};

/// grad() was queried on a tensor that no backward pass populated.
class AbsentGradError : public Error {
 public:
  using Error::Error;
};

/// A feature embedding has zero norm and cannot be scored.
class DegenerateEmbeddingError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Shape helpers
// ---------------------------------------------------------------------------

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Deterministic RNG.
//
// splitmix64 stream. Bit-exact on every platform, one u64 of state, so
// sample seeds and checkpointed RNG state serialize trivially and dataset
// samples stay pure functions of their recorded seed. (std distributions
// are implementation-defined, which would break stored-seed regeneration
// across toolchains.)
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

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  /// Uniform integer in [lo, hi], both ends inclusive.
  std::int64_t range_int(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  /// Standard normal via Box-Muller. Stateless between calls (the second
  /// deviate is discarded) so set_state/state round-trips capture everything.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

/// Derives an independent child seed from (parent seed, tag). Used for
/// per-sample, per-class and per-step sub-streams.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  Rng r(a ^ (0x632be59bd9b4e019ULL + 0x9e3779b97f4a7c15ULL * b));
  r.next_u64();
  return r.next_u64();
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

}  // namespace mwf
