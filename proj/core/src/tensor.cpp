#include "qalign/tensor.hpp"

#include <cmath>
#include <string>

namespace qalign {

void require_finite(const Matrix& m, const std::string& what) {
  const double* p = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    if (!std::isfinite(p[i])) {
      const auto r = i / std::max<Eigen::Index>(m.cols(), 1);
      const auto c = i % std::max<Eigen::Index>(m.cols(), 1);
      throw DataError(what + ": non-finite entry at (" + std::to_string(r) + ", " +
                      std::to_string(c) + ")");
    }
  }
}

Matrix make_matrix(std::size_t rows, std::size_t cols, const double* data, std::size_t len) {
  if (rows * cols != len) {
    throw ValidationError("matrix data length " + std::to_string(len) + " does not match shape " +
                          std::to_string(rows) + "x" + std::to_string(cols));
  }
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  std::copy(data, data + len, m.data());
  require_finite(m, "matrix");
  return m;
}

ActivationSet::ActivationSet(Matrix data) : data_(std::move(data)) {
  if (data_.rows() < 1 || data_.cols() < 1) {
    throw ValidationError("activation set needs at least one token and one channel");
  }
  require_finite(data_, "activations");
}

LinearLayer::LinearLayer(std::string name, Matrix weight, std::optional<std::string> group)
    : name_(std::move(name)), weight_(std::move(weight)), group_(std::move(group)) {
  if (weight_.rows() < 1 || weight_.cols() < 1) {
    throw ValidationError("layer '" + name_ + "' has an empty weight matrix");
  }
  require_finite(weight_, "weight of layer '" + name_ + "'");
  for (Eigen::Index r = 0; r < weight_.rows(); ++r) {
    if ((weight_.row(r).array() == 0.0).all()) {
      throw ValidationError("layer '" + name_ + "' row " + std::to_string(r) +
                            " is all zeros; its quantization range is undefined");
    }
  }
}

void require_paired(const LinearLayer& layer, const ActivationSet& x) {
  if (layer.in_features() != x.channels()) {
    throw DimensionError("layer '" + layer.name() + "' expects " +
                         std::to_string(layer.in_features()) + " input channels but activations have " +
                         std::to_string(x.channels()));
  }
}

Matrix layer_outputs(const Matrix& weight, const Matrix& activations) {
  if (weight.cols() != activations.cols()) {
    throw DimensionError("weight has " + std::to_string(weight.cols()) +
                         " input channels, activations have " + std::to_string(activations.cols()));
  }
  Matrix out = activations * weight.transpose();
  return out;
}

}  // namespace qalign
