#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "qalign/tensor.hpp"

namespace qalign {

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order and
/// eigenvectors as the matching columns.
struct EigenDecomposition {
  Vector values;
  Matrix vectors;
};

/// Eigendecomposition of any symmetric matrix (no flooring).
EigenDecomposition sym_eig(const Matrix& symmetric);

/// Symmetric positive definite matrix. Construction symmetrizes the input,
/// diagonalizes it and clamps every eigenvalue to at least
/// relative_floor * lambda_max.
class SpdMatrix {
 public:
  static constexpr double kDefaultFloor = 1e-12;

  explicit SpdMatrix(const Matrix& m, double relative_floor = kDefaultFloor);

  /// V diag(values) V^T; values need not be sorted.
  static SpdMatrix from_eigen(const Matrix& vectors, const Vector& values,
                              double relative_floor = kDefaultFloor);

  std::size_t dim() const noexcept { return static_cast<std::size_t>(matrix_.rows()); }
  const Matrix& matrix() const noexcept { return matrix_; }
  const Vector& eigenvalues() const noexcept { return eig_.values; }
  const Matrix& eigenvectors() const noexcept { return eig_.vectors; }
  double eigen_floor() const noexcept { return floor_; }
  /// Number of eigenvalues raised to the floor at construction.
  std::size_t floored_count() const noexcept { return floored_; }
  double condition_number() const;

  const std::vector<std::string>& diagnostics() const noexcept { return diagnostics_; }
  void add_diagnostic(std::string note) { diagnostics_.push_back(std::move(note)); }

 private:
  SpdMatrix() = default;
  void finish(EigenDecomposition eig, double relative_floor);

  Matrix matrix_;
  EigenDecomposition eig_;
  double floor_ = 0.0;
  std::size_t floored_ = 0;
  std::vector<std::string> diagnostics_;
};

EigenDecomposition sym_eig(const SpdMatrix& m);

/// V diag(lambda^p) V^T.
SpdMatrix spd_power(const SpdMatrix& m, double p);

/// A # B = A^{1/2} (A^{-1/2} B A^{-1/2})^{1/2} A^{1/2}, the unique SPD
/// solution G of G A^{-1} G = B.
SpdMatrix geometric_mean(const SpdMatrix& a, const SpdMatrix& b);

/// Largest absolute entry.
double max_abs(const Matrix& m);

}  // namespace qalign
