#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qalign/metrics.hpp"
#include "qalign/spd.hpp"
#include "qalign/tensor.hpp"

namespace qalign {

enum class TransformKind {
  identity,
  channel_scaling,
  hadamard,
  random_orthogonal,
  optimal_full,
  cat_block,
  /// Diagonal scaling m_i = sqrt(E[x_i^2] / sum_j w_ji^2) dividing the
  /// activations; kept to compare against the k = 1 block optimum.
  diag_ratio_sqrt,
};

/// Declarative transform; calibrated against a layer and its activations by
/// build_transform.
struct TransformSpec {
  TransformKind kind = TransformKind::identity;
  double alpha = 0.5;           // channel_scaling
  std::uint64_t seed = 0;       // random_orthogonal
  std::size_t block_size = 128; // cat_block
  bool hadamard_after = false;  // cat_block

  void validate(std::size_t d) const;
  /// Canonical CLI spelling: none, scale:0.5, hadamard, ortho:7, opt, cat:128, cat:128+h, diag-sqrt.
  std::string id() const;
  static TransformSpec parse(const std::string& text);
};

/// Invertible map applied as x -> T x, W -> W T^{-1}.
struct AppliedTransform {
  Matrix forward;
  Matrix inverse;
  /// max |T T^{-1} - I|.
  double residual = 0.0;
  /// forward is exactly a normalized Sylvester Hadamard matrix.
  bool pure_hadamard = false;
  /// Channels given unit scale because their statistics were degenerate.
  std::vector<std::size_t> flagged_channels;

  static AppliedTransform from_pair(Matrix forward, Matrix inverse);
  static AppliedTransform identity(std::size_t d);
  std::size_t dim() const noexcept { return static_cast<std::size_t>(forward.rows()); }
};

inline constexpr double kMaxTransformResidual = 1e-8;

bool is_power_of_two(std::size_t d);

/// Sylvester construction scaled by 1/sqrt(d).
Matrix hadamard_matrix(std::size_t d);

/// In-place normalized Walsh-Hadamard transform of one vector.
void fwht_inplace(std::span<double> v);

/// H x for every token in O(n d log d).
ActivationSet apply_fwht(const ActivationSet& x);

struct ChannelScales {
  /// s_i = max|x_i|^alpha / max_j |w_ji|^(1 - alpha).
  std::vector<double> scales;
  std::vector<std::size_t> flagged_channels;
};

ChannelScales channel_scales(const Matrix& w, const ActivationSet& x, double alpha);

/// x -> diag(s)^{-1} x and W -> W diag(s): moves activation outliers into
/// the weights.
AppliedTransform channel_scaling(const Matrix& w, const ActivationSet& x, double alpha);

struct AlignmentTransform {
  SpdMatrix transform;
  SpdMatrix inverse;
};

/// M = (Sigma_w # Sigma_x^{-1})^{1/2} together with its inverse.
AlignmentTransform optimal_alignment_pair(const SpdMatrix& sigma_w, const SpdMatrix& sigma_x);

/// The alignment-maximizing input transform M (symmetric PD).
Matrix optimal_alignment_transform(const SpdMatrix& sigma_w, const SpdMatrix& sigma_x);

/// diag(M_1, ..., M_{d/k}) built from the k x k diagonal blocks of
/// Sigma_w = W^T W and Sigma_x over contiguous channel ranges; optionally
/// followed by the full Hadamard (T = H M_block).
AppliedTransform cat_block(const Matrix& w, const Matrix& sigma_x, std::size_t k, bool hadamard_after);

/// Diagonal closed forms for k = 1 blocks. `optimal` gives
/// m_i = (Sigma_w,ii / Sigma_x,ii)^{1/4}; the other gives
/// m_i = sqrt(Sigma_w,ii / Sigma_x,ii) (inverse square root ratio form).
AppliedTransform diagonal_alignment(const Matrix& w, const Matrix& sigma_x, bool optimal);

/// Calibrates `spec` against a layer (or stacked group) and its inputs.
/// `eps` regularizes the activation autocorrelation before inversion.
AppliedTransform build_transform(const TransformSpec& spec, const LinearLayer& layer,
                                 const ActivationSet& x, double eps = 1e-6);

/// (W T^{-1}, T x); refuses (NumericalError) when the transform residual or
/// the measured output deviation exceeds 1e-8 relative.
std::pair<LinearLayer, ActivationSet> apply_transform(const LinearLayer& layer, const ActivationSet& x,
                                                      const AppliedTransform& t);

/// Activations only: rows x -> T x.
ActivationSet transform_activations(const ActivationSet& x, const AppliedTransform& t);

/// Stacks layers that consume the same input into one multi-head layer.
LinearLayer group_layers(std::span<const LinearLayer> layers);

}  // namespace qalign
