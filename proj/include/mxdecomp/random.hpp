// SPDX-License-Identifier: Apache-2.0
//
// Portable seeded random streams. Every draw is a pure function of
// (key, counter), so results do not depend on platform <random>
// distributions or on how work is split across threads.

#pragma once

#include <cstdint>
#include <string_view>

namespace mxdecomp {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t combine_key(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b + 0x632be59bd9b4e019ULL));
}

/// FNV-1a, used to key noise streams by tensor name.
constexpr std::uint64_t hash_name(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Uniform in [0, 1) from the top 53 bits.
inline double to_unit(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Uniform in (0, 1).
inline double to_open_unit(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

/// Standard normal at position `index` of stream `key` (Box-Muller on two
/// counter-derived uniforms).
double normal_at(std::uint64_t key, std::uint64_t index);

/// Sequential stream over one key.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(combine_key(seed, stream)) {}

  std::uint64_t next_u64() { return mix64(key_ ^ mix64(counter_++)); }
  double uniform() { return to_unit(next_u64()); }
  double uniform_open() { return to_open_unit(next_u64()); }
  double normal();
  double laplace();
  /// Gamma(shape, 1), Marsaglia-Tsang.
  double gamma(double shape);
  double student_t(double nu);
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mxdecomp
