#include "qalign/synth.hpp"

#include <cmath>
#include <string>

#include "qalign/error.hpp"

namespace qalign {

void FamilySpec::validate() const {
  if (family == Family::student_t && !(nu > 2.0)) {
    throw ValidationError("student_t needs nu > 2 for a finite variance, got " + std::to_string(nu));
  }
}

double FamilySpec::variance() const {
  switch (family) {
    case Family::gaussian:
      return 1.0;
    case Family::laplace:
      return 2.0;
    case Family::student_t:
      return nu / (nu - 2.0);
  }
  return 1.0;
}

double FamilySpec::draw(Rng& rng) const {
  switch (family) {
    case Family::gaussian:
      return rng.normal();
    case Family::laplace:
      return rng.laplace();
    case Family::student_t:
      return rng.student_t(nu);
  }
  return 0.0;
}

std::string FamilySpec::name() const {
  switch (family) {
    case Family::gaussian:
      return "gaussian";
    case Family::laplace:
      return "laplace";
    case Family::student_t:
      return "student_t";
  }
  return "?";
}

FamilySpec parse_family(std::string_view name, double nu) {
  FamilySpec f;
  if (name == "gaussian" || name == "normal") {
    f = FamilySpec::gaussian();
  } else if (name == "laplace") {
    f = FamilySpec::laplace();
  } else if (name == "student_t") {
    f = FamilySpec::student_t(nu);
  } else {
    throw ValidationError("unknown family '" + std::string(name) + "'");
  }
  f.validate();
  return f;
}

void DistSpec::validate(std::size_t channels) const {
  family.validate();
  if (covariance.type == CovarianceSpec::Type::diagonal) {
    if (covariance.scales.size() != channels) {
      throw ValidationError("diagonal covariance has " + std::to_string(covariance.scales.size()) +
                            " scales for " + std::to_string(channels) + " channels");
    }
    for (double s : covariance.scales) {
      if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("diagonal scales must be positive");
    }
  }
  if (covariance.type == CovarianceSpec::Type::random_spd &&
      !(covariance.condition_number >= 1.0 && std::isfinite(covariance.condition_number))) {
    throw ValidationError("random_spd condition_number must be >= 1");
  }
  for (const auto& o : outliers) {
    if (o.channel >= channels) {
      throw ValidationError("outlier channel " + std::to_string(o.channel) + " out of range for " +
                            std::to_string(channels) + " channels");
    }
    if (!(o.factor >= 1.0) || !std::isfinite(o.factor)) {
      throw ValidationError("outlier amplification must be >= 1");
    }
  }
}

Matrix random_orthogonal(std::size_t d, Rng& rng) {
  const auto n = static_cast<Eigen::Index>(d);
  Matrix q(n, n);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < n; ++c) q(r, c) = rng.normal();

  // Modified Gram-Schmidt over rows, two passes for orthogonality at d ~ 1e3.
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int pass = 0; pass < 2; ++pass) {
      for (Eigen::Index j = 0; j < i; ++j) {
        double dot = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) dot += q(i, k) * q(j, k);
        for (Eigen::Index k = 0; k < n; ++k) q(i, k) -= dot * q(j, k);
      }
    }
    double norm = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) norm += q(i, k) * q(i, k);
    norm = std::sqrt(norm);
    if (!(norm > 0.0)) throw NumericalError("random_orthogonal: degenerate draw");
    for (Eigen::Index k = 0; k < n; ++k) q(i, k) /= norm;
  }
  return q;
}

namespace {

std::vector<double> log_uniform_spectrum(std::size_t d, double condition_number, Rng& rng) {
  std::vector<double> lambda(d, 1.0);
  if (d >= 2) {
    const double log_k = std::log(condition_number);
    lambda[d - 1] = 1.0 / condition_number;
    for (std::size_t i = 1; i + 1 < d; ++i) lambda[i] = std::exp(-log_k * rng.uniform());
  }
  return lambda;
}

}  // namespace

Matrix random_spd(std::size_t d, double condition_number, Rng& rng) {
  const Matrix q = random_orthogonal(d, rng);
  const auto lambda = log_uniform_spectrum(d, condition_number, rng);
  const auto n = static_cast<Eigen::Index>(d);
  Matrix out = Matrix::Zero(n, n);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c <= r; ++c) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < n; ++k) s += q(k, r) * lambda[k] * q(k, c);
      out(r, c) = s;
      out(c, r) = s;
    }
  return out;
}

Matrix shaping_matrix(std::size_t d, const CovarianceSpec& cov, Seed seed) {
  const auto n = static_cast<Eigen::Index>(d);
  switch (cov.type) {
    case CovarianceSpec::Type::identity:
      return Matrix::Identity(n, n);
    case CovarianceSpec::Type::diagonal: {
      Matrix s = Matrix::Zero(n, n);
      for (Eigen::Index i = 0; i < n; ++i) s(i, i) = cov.scales.at(static_cast<std::size_t>(i));
      return s;
    }
    case CovarianceSpec::Type::random_spd: {
      // Columns of Q^T scaled by sqrt(lambda): S = Q^T diag(sqrt(lambda)),
      // so S S^T = Q^T diag(lambda) Q, the same matrix random_spd builds.
      Rng rng = Rng::derive(seed.value, "covariance");
      const Matrix q = random_orthogonal(d, rng);
      const auto lambda = log_uniform_spectrum(d, cov.condition_number, rng);
      Matrix s(n, n);
      for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index c = 0; c < n; ++c)
          s(r, c) = q(c, r) * std::sqrt(lambda[static_cast<std::size_t>(c)]);
      return s;
    }
  }
  return Matrix::Identity(n, n);
}

ActivationSet gen_activations(std::size_t d, std::size_t n, const DistSpec& spec, Seed seed) {
  if (d < 1 || n < 1) throw ValidationError("gen_activations needs d >= 1 and n >= 1");
  spec.validate(d);

  const Matrix shape = shaping_matrix(d, spec.covariance, seed);
  const bool identity = spec.covariance.type == CovarianceSpec::Type::identity;
  const Matrix shape_t = shape.transpose();

  std::vector<double> factor(d, 1.0);
  for (const auto& o : spec.outliers) factor[o.channel] *= o.factor;

  Rng rng = Rng::derive(seed.value, "activations");
  Matrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  std::vector<double> z(d), acc(d);
  for (std::size_t t = 0; t < n; ++t) {
    for (auto& v : z) v = spec.family.draw(rng);
    if (identity) {
      acc = z;
    } else {
      // acc = S z, accumulated in a fixed k order for reproducibility.
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t k = 0; k < d; ++k) {
        const double zk = z[k];
        const double* row = shape_t.data() + k * d;
        for (std::size_t j = 0; j < d; ++j) acc[j] += row[j] * zk;
      }
    }
    for (std::size_t j = 0; j < d; ++j) {
      x(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)) = acc[j] * factor[j];
    }
  }
  return ActivationSet(std::move(x));
}

LinearLayer gen_layer(std::string name, std::size_t d_out, std::size_t d_in, const FamilySpec& family,
                      Seed seed) {
  if (d_out < 1 || d_in < 1) throw ValidationError("gen_layer needs d_out, d_in >= 1");
  family.validate();
  Rng rng = Rng::derive(seed.value, "weights");
  Matrix w(static_cast<Eigen::Index>(d_out), static_cast<Eigen::Index>(d_in));
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    do {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = family.draw(rng);
    } while ((w.row(r).array() == 0.0).all());
  }
  return LinearLayer(std::move(name), std::move(w));
}

}  // namespace qalign
