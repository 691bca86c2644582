#pragma once
// Shared plumbing: error taxonomy, logging, hashing, version tag.

#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace p2plab {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Error taxonomy maps onto distinct CLI exit codes: config errors (bad flags,
// malformed config files), data errors (scenario layout, schema, topology) and
// numerical errors (divergence, non-finite values).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TopologyError : DataError {
  using DataError::DataError;
};
struct UnsupportedTopologyError : TopologyError {
  using TopologyError::TopologyError;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DivergenceError : NumericalError {
  using NumericalError::NumericalError;
};

using Rng = std::mt19937_64;

// --- logging ------------------------------------------------------------
// Verbosity from P2PLAB_LOG: 0 silent (default for errors only), 1 info,
// 2 debug.  Goes to stderr so stdout stays machine-readable.

inline int log_level() {
  static int lvl = [] {
    const char* e = std::getenv("P2PLAB_LOG");
    return e ? std::atoi(e) : 0;
  }();
  return lvl;
}

inline void logf(int lvl, const char* fmt, ...) {
  if (log_level() < lvl) return;
  va_list ap;
  va_start(ap, fmt);
  std::vfprintf(stderr, fmt, ap);
  std::fputc('\n', stderr);
  va_end(ap);
}

// --- hashing ------------------------------------------------------------
// FNV-1a, used to stamp configs into metrics logs so runs are attributable.

inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t seed = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s,
                           std::uint64_t seed = 1469598103934665603ull) {
  return fnv1a(s.data(), s.size(), seed);
}

}  // namespace p2plab
