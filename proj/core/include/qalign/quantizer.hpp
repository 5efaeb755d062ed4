#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "qalign/tensor.hpp"

namespace qalign {

enum class Symmetry { symmetric, asymmetric };
enum class Granularity { per_row, per_token, per_tensor };
enum class RangePolicy { dynamic, static_ranges };

std::string to_string(Symmetry s);
std::string to_string(Granularity g);

/// Closed interval [lo, hi] mapped onto the integer grid.
struct QuantRange {
  double lo = 0.0;
  double hi = 0.0;

  double width() const noexcept { return hi - lo; }
  bool degenerate() const noexcept { return hi == lo; }
};

/// Number of quantization steps at a bit width: 2^b - 1. Symmetric grids use
/// the same count, so zero is not a grid point for them.
double step_count(int bits);

struct QuantConfig {
  int bits = 8;
  Symmetry symmetry = Symmetry::symmetric;
  Granularity granularity = Granularity::per_row;
  RangePolicy policy = RangePolicy::dynamic;
  /// Static policy: one range per quantization group (1 for per_tensor).
  std::vector<QuantRange> static_ranges;
  /// Set when static ranges were calibrated with percentile clipping; the
  /// SQNR predictor assumes negligible clipping, so reports flag this.
  bool percentile_calibrated = false;

  static QuantConfig weights(int bits, Symmetry s = Symmetry::symmetric) {
    return {bits, s, Granularity::per_row, RangePolicy::dynamic, {}, false};
  }
  static QuantConfig activations(int bits, Symmetry s = Symmetry::asymmetric) {
    return {bits, s, Granularity::per_token, RangePolicy::dynamic, {}, false};
  }

  /// `for_weights` selects which granularities are legal.
  void validate(bool for_weights) const;
};

/// Asymmetric: [min, max]. Symmetric: [-m, m] with m = max |v|.
QuantRange compute_range(std::span<const double> values, Symmetry symmetry);

/// lo + round_half_even((v - lo) / s) * s clamped to [lo, hi], with
/// s = (hi - lo) / (2^b - 1). A zero-width range passes values through.
void quantize_dequantize(std::span<const double> values, const QuantRange& range, int bits,
                         std::span<double> out);
std::vector<double> quantize_dequantize(std::span<const double> values, const QuantRange& range,
                                        int bits);

struct QuantizedMatrix {
  Matrix values;
  /// Groups whose range had zero width and were passed through.
  std::size_t degenerate_groups = 0;
  /// Entries that fell outside a static range and were clamped.
  std::size_t clipped_entries = 0;
  /// Groups (rows/tokens) with at least one clamped entry.
  std::size_t clipped_groups = 0;
};

QuantizedMatrix quantize_weights(const Matrix& w, const QuantConfig& cfg);
QuantizedMatrix quantize_activations(const ActivationSet& x, const QuantConfig& cfg);

/// Range a static activation quantizer would use: the union of per-token
/// ranges over the calibration tokens, or, for percentile < 100, the given
/// percentile of per-token extremes (clips by design).
QuantRange calibrate_static_range(const ActivationSet& calibration, Symmetry symmetry,
                                  double percentile = 100.0);

/// Statistics of delta = original - quantized, columns as channels and rows
/// as samples.
struct NoiseStats {
  std::vector<double> mean;
  std::vector<double> variance;
  /// max |corr(delta_i, delta_j)| over i != j; 0 for a single channel.
  double cross_channel_corr = 0.0;
  /// max over channels of |corr(x_i, delta_i)|.
  double signal_noise_corr = 0.0;
};

NoiseStats noise_stats(const Matrix& original, const Matrix& quantized);

}  // namespace qalign
