#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qalign/quantizer.hpp"
#include "qalign/synth.hpp"
#include "qalign/tensor.hpp"

namespace qalign {

/// 10 log10 of a power ratio.
struct Decibel {
  double value = 0.0;

  static Decibel from_ratio(double ratio);
  double to_ratio() const;
};

/// Non-negative power ratio with a distinguished "exact" state standing in
/// for +infinity (zero error, collapsed range). The exact state never enters
/// floating-point arithmetic.
class Ratio {
 public:
  static Ratio exact() { return Ratio(); }
  explicit Ratio(double value);

  bool is_exact() const noexcept { return exact_; }
  /// Throws UndefinedMetricError for the exact state.
  double value() const;
  Decibel db() const;
  /// "exact" or the dB value with the given number of decimals.
  std::string db_string(int decimals) const;

  friend bool operator==(const Ratio& a, const Ratio& b) {
    return a.exact_ == b.exact_ && (a.exact_ || a.value_ == b.value_);
  }

 private:
  Ratio() : exact_(true) {}
  double value_ = 0.0;
  bool exact_ = false;
};

/// E||signal||^2 / E||signal - noisy||^2 over rows (tokens).
Ratio sqnr(const Matrix& signal_out, const Matrix& noisy_out);

/// (1/a + 1/b)^-1; parallel(a, exact) = a.
Ratio parallel(Ratio a, Ratio b);

/// E||x||^2 / E[rho(x)^2] with per-token dynamic ranges.
Ratio concentration_activations(const ActivationSet& x, Symmetry symmetry);
/// Same, but ranges follow `cfg` (static ranges, per-tensor range).
Ratio concentration_activations(const ActivationSet& x, const QuantConfig& cfg);
/// sum_i ||w_i||^2 / sum_i rho(w_i)^2 over rows.
Ratio concentration_weights(const Matrix& w, Symmetry symmetry);
/// Weight concentration under `cfg` (per_row or per_tensor ranges).
Ratio concentration_weights(const Matrix& w, const QuantConfig& cfg);

/// Second-moment matrix E[x x^T] of an activation set.
struct Autocorrelation {
  Matrix matrix;
  std::size_t sample_count = 0;

  double trace() const { return matrix.trace(); }
};

/// (1/n) X^T X, symmetrized.
Autocorrelation autocorrelation(const ActivationSet& x);

/// Adds eps * (trace / d) * I; default eps 1e-6.
Matrix regularized(const Autocorrelation& sigma, double eps = 1e-6);

/// tr(W^T W Sigma_x) / (tr(W^T W) tr(Sigma_x)).
double alignment(const Matrix& w, const Autocorrelation& sigma_x);
double alignment(const Matrix& w, const Matrix& sigma_x);
/// E||W x||^2 / (||W||_F^2 E||x||^2) evaluated directly on the samples.
double alignment_sampled(const Matrix& w, const ActivationSet& x);

/// Best alignment any invertible input transform can reach:
/// sum_i s_i^2 / (sum_i s_i)^2 where s_i^2 are the eigenvalues of
/// Sigma_y = W Sigma_x W^T (s_i are the singular values of W Sigma_x^{1/2}).
double max_alignment(const Matrix& w, const Autocorrelation& sigma_x);
double max_alignment(const Matrix& w, const Matrix& sigma_x);

/// 12 (N(b_x)^2 C_x || N(b_w)^2 C_W) A with N(b) = 2^b - 1.
Ratio predicted_sqnr(int b_x, int b_w, Ratio c_x, Ratio c_w, double a);
/// Activation-only and weight-only factors of the prediction.
Ratio predicted_sqnr_activations(int b_x, Ratio c_x, double a);
Ratio predicted_sqnr_weights(int b_w, Ratio c_w, double a);

/// SQNR(W xq) / SQNR(Wq x) implied by the single-side predictions:
/// N(b_x)^2 C_x / (N(b_w)^2 C_W). Alignment cancels.
Ratio sqnr_ratio_r(int b_x, int b_w, Ratio c_x, Ratio c_w);

struct ReferenceConcentration {
  double value = 0.0;
  double std_error = 0.0;
  /// value / d: mean per-channel energy over mean squared range.
  double per_channel = 0.0;
  double per_channel_std_error = 0.0;
};

/// Monte-Carlo concentration of i.i.d. unit-scale draws of `family` in d
/// dimensions. Standard errors use the delta method for a ratio of means.
ReferenceConcentration reference_concentration(const FamilySpec& family, std::size_t d,
                                               Symmetry symmetry, std::size_t trials,
                                               std::uint64_t seed = 0);

struct LayerAnalysis {
  Ratio sqnr_measured_joint = Ratio::exact();
  Ratio sqnr_measured_act_only = Ratio::exact();
  Ratio sqnr_measured_w_only = Ratio::exact();
  Ratio sqnr_predicted = Ratio::exact();
  Ratio c_x = Ratio::exact();
  Ratio c_w = Ratio::exact();
  double alignment = 0.0;
  double max_alignment = 0.0;
  Ratio r = Ratio::exact();
  int b_x = 0;
  int b_w = 0;
  std::size_t degenerate_groups = 0;
  /// Largest share of total signal energy carried by a single token.
  double max_token_signal_share = 0.0;
  /// Tokens with at least one clamped activation (static ranges).
  std::size_t clipped_tokens = 0;
  std::vector<std::string> flags;

  /// sqnr_predicted - sqnr_measured_joint in dB; 0 when both are exact,
  /// empty when only one of them is.
  std::optional<double> gap_db() const;
};

/// Measures joint / activation-only / weight-only SQNR through the quantizer
/// and fills the predicted factorization.
LayerAnalysis analyze_layer(const LinearLayer& layer, const ActivationSet& x, const QuantConfig& cfg_w,
                            const QuantConfig& cfg_a);

}  // namespace qalign
