#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "qalign/rng.hpp"
#include "qalign/tensor.hpp"

namespace qalign {

enum class Family { gaussian, laplace, student_t };

/// Marginal distribution of the white samples, unit scale.
struct FamilySpec {
  Family family = Family::gaussian;
  double nu = 0.0;  // degrees of freedom, student_t only; must exceed 2

  static FamilySpec gaussian() { return {Family::gaussian, 0.0}; }
  static FamilySpec laplace() { return {Family::laplace, 0.0}; }
  static FamilySpec student_t(double nu) { return {Family::student_t, nu}; }

  void validate() const;
  /// Variance of one unit-scale draw: 1, 2, nu/(nu-2).
  double variance() const;
  double draw(Rng& rng) const;
  std::string name() const;
};

FamilySpec parse_family(std::string_view name, double nu = 0.0);

struct CovarianceSpec {
  enum class Type { identity, diagonal, random_spd };
  Type type = Type::identity;
  /// diagonal: per-channel standard deviations (covariance is diag(scales^2)).
  std::vector<double> scales;
  /// random_spd: ratio of largest to smallest eigenvalue.
  double condition_number = 1.0;
};

struct OutlierChannel {
  std::size_t channel = 0;
  double factor = 1.0;
};

struct DistSpec {
  FamilySpec family;
  CovarianceSpec covariance;
  std::vector<OutlierChannel> outliers;

  /// Throws ValidationError if the spec cannot describe `channels` channels.
  void validate(std::size_t channels) const;
};

struct Seed {
  std::uint64_t value = 0;
};

/// n tokens of d channels: white family draws z, shaped as x = S z with
/// S S^T equal to the requested covariance, then outlier channels scaled.
ActivationSet gen_activations(std::size_t d, std::size_t n, const DistSpec& spec, Seed seed);

/// The shaping matrix S used by gen_activations (before outlier scaling).
/// Its covariance is S S^T; the activations' covariance is that times the
/// family variance.
Matrix shaping_matrix(std::size_t d, const CovarianceSpec& cov, Seed seed);

/// i.i.d. unit-scale draws; rows that come out all-zero are redrawn.
LinearLayer gen_layer(std::string name, std::size_t d_out, std::size_t d_in, const FamilySpec& family,
                      Seed seed);

/// Haar-ish random orthogonal matrix (Gram-Schmidt on Gaussian columns with
/// fixed loop order).
Matrix random_orthogonal(std::size_t d, Rng& rng);

/// Q diag(lambda) Q^T with lambda log-uniform in [1/condition, 1] and both
/// endpoints present when d >= 2.
Matrix random_spd(std::size_t d, double condition_number, Rng& rng);

}  // namespace qalign
