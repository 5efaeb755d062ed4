#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include <Eigen/Dense>

#include "qalign/error.hpp"

namespace qalign {

/// Dense row-major matrix of doubles. Carries weights, transforms and
/// autocorrelations alike.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Throws DataError naming `what` if any entry is NaN or infinite.
void require_finite(const Matrix& m, const std::string& what);

/// Builds a matrix from a row-major buffer, validating length and finiteness.
Matrix make_matrix(std::size_t rows, std::size_t cols, const double* data, std::size_t len);

/// A batch of activation vectors, one token per row (n x d).
class ActivationSet {
 public:
  explicit ActivationSet(Matrix data);

  std::size_t tokens() const noexcept { return static_cast<std::size_t>(data_.rows()); }
  std::size_t channels() const noexcept { return static_cast<std::size_t>(data_.cols()); }
  const Matrix& data() const noexcept { return data_; }

 private:
  Matrix data_;
};

/// A linear layer y = W x with W of shape d_out x d_in.
class LinearLayer {
 public:
  LinearLayer(std::string name, Matrix weight, std::optional<std::string> group = std::nullopt);

  const std::string& name() const noexcept { return name_; }
  const Matrix& weight() const noexcept { return weight_; }
  const std::optional<std::string>& group() const noexcept { return group_; }
  std::size_t in_features() const noexcept { return static_cast<std::size_t>(weight_.cols()); }
  std::size_t out_features() const noexcept { return static_cast<std::size_t>(weight_.rows()); }

 private:
  std::string name_;
  Matrix weight_;
  std::optional<std::string> group_;
};

/// Throws DimensionError unless the layer consumes `x.channels()` inputs.
void require_paired(const LinearLayer& layer, const ActivationSet& x);

/// Layer outputs for every token, n x d_out.
Matrix layer_outputs(const Matrix& weight, const Matrix& activations);

}  // namespace qalign
