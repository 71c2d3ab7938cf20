#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "blxs/matrix.hpp"

namespace blxs {

/// Deterministic counter-based random stream.
///
/// Output i of a stream is avalanche(key ^ avalanche(counter)), where the key
/// is derived from (seed, label). Identical (seed, label) pairs reproduce the
/// identical sequence on any platform; streams with distinct labels are
/// statistically independent. Normal deviates come from Box-Muller, with the
/// spare deviate cached inside the stream, so a stream is confined to one
/// logical task.
class RngStream {
public:
  explicit RngStream(std::uint64_t seed) : key_(avalanche(seed ^ kRootSalt)) {}

  RngStream(std::uint64_t seed, std::string_view label) : RngStream(seed) {
    key_ = avalanche(key_ ^ hash_label(label));
  }

  /// Independent child stream; does not advance this stream.
  RngStream derive(std::string_view label) const {
    RngStream child(*this);
    child.key_ = avalanche(key_ ^ hash_label(label));
    child.counter_ = 0;
    child.has_spare_ = false;
    return child;
  }

  RngStream derive(std::string_view label, std::uint64_t index) const {
    RngStream child = derive(label);
    child.key_ = avalanche(child.key_ ^ avalanche(index + 0x9E3779B97F4A7C15ULL));
    return child;
  }

  std::uint64_t next_u64() { return avalanche(key_ ^ avalanche(++counter_)); }

  /// Uniform in [0, 1).
  double next_unit() { return double(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal deviate.
  double next_gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] so the log is finite.
    const double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = next_unit();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    const double ang = 2.0 * std::numbers::pi * u2;
    spare_ = mag * std::sin(ang);
    has_spare_ = true;
    return mag * std::cos(ang);
  }

  /// Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) {
    // Rejection sampling keeps the distribution exact.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  std::uint64_t key() const { return key_; }

private:
  static constexpr std::uint64_t kRootSalt = 0x426C7852531ULL;  // arbitrary fixed salt

  static std::uint64_t avalanche(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t hash_label(std::string_view label) {
    std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
    for (char c : label) {
      h ^= std::uint64_t(static_cast<unsigned char>(c));
      h *= 0x100000001B3ULL;
    }
    return h;
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline std::vector<double> gaussian_vector(RngStream& rng, std::size_t n) {
  if (n < 1) throw std::invalid_argument("gaussian_vector: n must be >= 1");
  std::vector<double> v(n);
  for (double& x : v) x = rng.next_gaussian();
  return v;
}

inline Matrix gaussian_matrix(RngStream& rng, std::size_t rows, std::size_t cols,
                              double stddev = 1.0) {
  Matrix m(rows, cols);
  for (double& x : m.data()) x = stddev * rng.next_gaussian();
  return m;
}

/// Deterministic Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> random_permutation(RngStream& rng, std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = std::size_t(rng.next_below(i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace blxs
