#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string_view>

namespace qalign {

/// Seeded random source. The engine is std::mt19937_64, whose output
/// sequence is fixed by the C++ standard; every distribution below is
/// implemented here from raw 64-bit draws so streams do not depend on the
/// standard library's distribution classes.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Independent child stream keyed by `(seed, stream)`.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);
  static Rng derive(std::uint64_t seed, std::string_view stream);

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Uniform on (0, 1).
  double uniform_open();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal();
  /// Laplace with location 0 and scale 1 (variance 2).
  double laplace();
  /// Gamma with the given shape and unit scale.
  double gamma(double shape);
  /// Student-t with `nu` degrees of freedom, unit scale.
  double student_t(double nu);

 private:
  std::mt19937_64 engine_;
  std::optional<double> spare_normal_;
};

/// SplitMix64 finalizer; used to derive stream seeds.
std::uint64_t mix64(std::uint64_t x);

/// FNV-1a over bytes; stable across platforms.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace qalign
