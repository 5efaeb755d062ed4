#include "qalign/spd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qalign/error.hpp"

namespace qalign {

double max_abs(const Matrix& m) {
  return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
}

namespace {

Matrix symmetrized(const Matrix& m) {
  Matrix s = 0.5 * (m + m.transpose());
  return s;
}

Matrix compose(const Matrix& vectors, const Vector& values) {
  Matrix out = vectors * values.asDiagonal() * vectors.transpose();
  return symmetrized(out);
}

}  // namespace

EigenDecomposition sym_eig(const Matrix& symmetric) {
  if (symmetric.rows() != symmetric.cols()) {
    throw DimensionError("sym_eig: matrix is " + std::to_string(symmetric.rows()) + "x" +
                         std::to_string(symmetric.cols()));
  }
  const Eigen::MatrixXd col_major = symmetric;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(col_major);
  if (solver.info() != Eigen::Success) {
    throw NumericalError("sym_eig: eigensolver did not converge (dim " +
                         std::to_string(symmetric.rows()) + ", max |entry| " +
                         std::to_string(max_abs(symmetric)) + ")");
  }
  const auto n = symmetric.rows();
  EigenDecomposition out;
  out.values.resize(n);
  out.vectors.resize(n, n);
  // Eigen returns ascending order.
  for (Eigen::Index i = 0; i < n; ++i) {
    out.values(i) = solver.eigenvalues()(n - 1 - i);
    out.vectors.col(i) = solver.eigenvectors().col(n - 1 - i);
  }
  return out;
}

SpdMatrix::SpdMatrix(const Matrix& m, double relative_floor) {
  if (m.rows() != m.cols() || m.rows() == 0) {
    throw DimensionError("SpdMatrix needs a non-empty square matrix");
  }
  require_finite(m, "SpdMatrix");
  const double scale = max_abs(m);
  if (max_abs(m - m.transpose()) > 1e-10 * scale) {
    throw ValidationError("SpdMatrix: input is not symmetric to 1e-10 relative");
  }
  matrix_ = symmetrized(m);
  finish(sym_eig(matrix_), relative_floor);
}

SpdMatrix SpdMatrix::from_eigen(const Matrix& vectors, const Vector& values, double relative_floor) {
  SpdMatrix out;
  const auto n = values.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return values(a) > values(b); });
  EigenDecomposition eig;
  eig.values.resize(n);
  eig.vectors.resize(vectors.rows(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    eig.values(i) = values(order[static_cast<std::size_t>(i)]);
    eig.vectors.col(i) = vectors.col(order[static_cast<std::size_t>(i)]);
  }
  out.matrix_ = compose(eig.vectors, eig.values);
  out.finish(std::move(eig), relative_floor);
  return out;
}

void SpdMatrix::finish(EigenDecomposition eig, double relative_floor) {
  const double top = eig.values.size() > 0 ? eig.values(0) : 0.0;
  if (!(top > 0.0)) {
    throw NumericalError("SpdMatrix: largest eigenvalue " + std::to_string(top) + " is not positive");
  }
  floor_ = relative_floor * top;
  floored_ = 0;
  for (Eigen::Index i = 0; i < eig.values.size(); ++i) {
    if (eig.values(i) < floor_) {
      eig.values(i) = floor_;
      ++floored_;
    }
  }
  if (floored_ > 0) matrix_ = compose(eig.vectors, eig.values);
  eig_ = std::move(eig);
}

double SpdMatrix::condition_number() const {
  return eig_.values(0) / eig_.values(eig_.values.size() - 1);
}

EigenDecomposition sym_eig(const SpdMatrix& m) {
  return {m.eigenvalues(), m.eigenvectors()};
}

SpdMatrix spd_power(const SpdMatrix& m, double p) {
  const Vector powered = m.eigenvalues().array().pow(p).matrix();
  SpdMatrix out = SpdMatrix::from_eigen(m.eigenvectors(), powered);
  if (p < 0.0 && m.floored_count() > 0) {
    out.add_diagnostic("negative power of a matrix with " + std::to_string(m.floored_count()) +
                       " eigenvalue(s) at the floor; condition number " +
                       std::to_string(m.condition_number()));
  }
  for (const auto& d : m.diagnostics()) out.add_diagnostic(d);
  return out;
}

SpdMatrix geometric_mean(const SpdMatrix& a, const SpdMatrix& b) {
  if (a.dim() != b.dim()) {
    throw ValidationError("geometric_mean: dimensions " + std::to_string(a.dim()) + " and " +
                          std::to_string(b.dim()) + " differ");
  }
  const Matrix& v = a.eigenvectors();
  const Vector root = a.eigenvalues().cwiseSqrt();
  const Vector inv_root = root.cwiseInverse();
  const Matrix a_half = compose(v, root);
  const Matrix a_inv_half = compose(v, inv_root);

  const Matrix inner = symmetrized(a_inv_half * b.matrix() * a_inv_half);
  const SpdMatrix inner_root = spd_power(SpdMatrix(inner), 0.5);
  const Matrix g = symmetrized(a_half * inner_root.matrix() * a_half);
  SpdMatrix out(g);
  for (const auto& d : a.diagnostics()) out.add_diagnostic(d);
  for (const auto& d : b.diagnostics()) out.add_diagnostic(d);
  return out;
}

}  // namespace qalign
