#include "qalign/quantizer.hpp"

#include <algorithm>
#include <cfenv>
#include <cmath>

#include "qalign/error.hpp"

namespace qalign {

std::string to_string(Symmetry s) {
  return s == Symmetry::symmetric ? "symmetric" : "asymmetric";
}

std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::per_row:
      return "per_row";
    case Granularity::per_token:
      return "per_token";
    case Granularity::per_tensor:
      return "per_tensor";
  }
  return "?";
}

double step_count(int bits) {
  if (bits < 2 || bits > 16) {
    throw ValidationError("bit width must be in [2, 16], got " + std::to_string(bits));
  }
  return std::ldexp(1.0, bits) - 1.0;
}

void QuantConfig::validate(bool for_weights) const {
  step_count(bits);
  if (for_weights && granularity == Granularity::per_token) {
    throw ValidationError("per_token granularity applies to activations only");
  }
  if (!for_weights && granularity == Granularity::per_row) {
    throw ValidationError("per_row granularity applies to weights only");
  }
  if (policy == RangePolicy::static_ranges) {
    if (static_ranges.empty()) throw ValidationError("static range policy without ranges");
    for (const auto& r : static_ranges) {
      if (!(r.hi >= r.lo) || !std::isfinite(r.lo) || !std::isfinite(r.hi)) {
        throw ValidationError("static range must satisfy lo <= hi");
      }
      if (symmetry == Symmetry::symmetric && r.lo != -r.hi) {
        throw ValidationError("symmetric static range must satisfy lo == -hi");
      }
    }
  }
}

QuantRange compute_range(std::span<const double> values, Symmetry symmetry) {
  if (values.empty()) throw ValidationError("compute_range: empty vector");
  if (symmetry == Symmetry::symmetric) {
    double m = 0.0;
    for (double v : values) m = std::max(m, std::abs(v));
    return {-m, m};
  }
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  return {*lo, *hi};
}

namespace {

// Returns the number of clamped entries.
std::size_t quantize_into(std::span<const double> values, const QuantRange& range, double steps,
                          std::span<double> out) {
  if (range.degenerate()) {
    std::copy(values.begin(), values.end(), out.begin());
    return 0;
  }
  const double s = range.width() / steps;
  std::size_t clipped = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = values[i];
    if (v < range.lo || v > range.hi) ++clipped;
    // Default FE_TONEAREST: ties go to even.
    double k = std::nearbyint((v - range.lo) / s);
    k = std::clamp(k, 0.0, steps);
    out[i] = std::clamp(range.lo + k * s, range.lo, range.hi);
  }
  return clipped;
}

}  // namespace

void quantize_dequantize(std::span<const double> values, const QuantRange& range, int bits,
                         std::span<double> out) {
  if (out.size() != values.size()) throw DimensionError("quantize_dequantize: output size mismatch");
  if (!(range.hi >= range.lo)) throw ValidationError("quantize_dequantize: range has hi < lo");
  quantize_into(values, range, step_count(bits), out);
}

std::vector<double> quantize_dequantize(std::span<const double> values, const QuantRange& range,
                                        int bits) {
  std::vector<double> out(values.size());
  quantize_dequantize(values, range, bits, out);
  return out;
}

namespace {

// Quantizes row groups (per_row / per_token) or the whole matrix.
QuantizedMatrix quantize_rows(const Matrix& m, const QuantConfig& cfg) {
  const double steps = step_count(cfg.bits);
  QuantizedMatrix q;
  q.values.resize(m.rows(), m.cols());
  const auto cols = static_cast<std::size_t>(m.cols());

  if (cfg.granularity == Granularity::per_tensor) {
    std::span<const double> all(m.data(), static_cast<std::size_t>(m.size()));
    if (cfg.policy == RangePolicy::static_ranges && cfg.static_ranges.size() != 1) {
      throw ValidationError("per_tensor static policy needs exactly one range, got " +
                            std::to_string(cfg.static_ranges.size()));
    }
    const QuantRange r = cfg.policy == RangePolicy::static_ranges ? cfg.static_ranges.front()
                                                                   : compute_range(all, cfg.symmetry);
    if (r.degenerate()) q.degenerate_groups = 1;
    for (Eigen::Index row = 0; row < m.rows(); ++row) {
      const auto c = quantize_into({m.row(row).data(), cols}, r, steps,
                                   {q.values.row(row).data(), cols});
      q.clipped_entries += c;
      q.clipped_groups += c > 0 ? 1 : 0;
    }
    return q;
  }

  if (cfg.policy == RangePolicy::static_ranges &&
      cfg.static_ranges.size() != static_cast<std::size_t>(m.rows())) {
    throw ValidationError("static policy has " + std::to_string(cfg.static_ranges.size()) +
                          " ranges for " + std::to_string(m.rows()) + " quantization groups");
  }
  for (Eigen::Index row = 0; row < m.rows(); ++row) {
    std::span<const double> in(m.row(row).data(), cols);
    const QuantRange r = cfg.policy == RangePolicy::static_ranges
                             ? cfg.static_ranges[static_cast<std::size_t>(row)]
                             : compute_range(in, cfg.symmetry);
    if (r.degenerate()) ++q.degenerate_groups;
    const auto c = quantize_into(in, r, steps, {q.values.row(row).data(), cols});
    q.clipped_entries += c;
    q.clipped_groups += c > 0 ? 1 : 0;
  }
  return q;
}

}  // namespace

QuantizedMatrix quantize_weights(const Matrix& w, const QuantConfig& cfg) {
  cfg.validate(true);
  return quantize_rows(w, cfg);
}

QuantizedMatrix quantize_activations(const ActivationSet& x, const QuantConfig& cfg) {
  cfg.validate(false);
  return quantize_rows(x.data(), cfg);
}

QuantRange calibrate_static_range(const ActivationSet& calibration, Symmetry symmetry,
                                  double percentile) {
  if (!(percentile > 0.0 && percentile <= 100.0)) {
    throw ValidationError("percentile must be in (0, 100]");
  }
  const Matrix& m = calibration.data();
  const auto cols = static_cast<std::size_t>(m.cols());
  std::vector<double> lows, highs;
  lows.reserve(static_cast<std::size_t>(m.rows()));
  highs.reserve(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const QuantRange t = compute_range({m.row(r).data(), cols}, symmetry);
    lows.push_back(t.lo);
    highs.push_back(t.hi);
  }
  if (percentile >= 100.0) {
    return {*std::min_element(lows.begin(), lows.end()), *std::max_element(highs.begin(), highs.end())};
  }
  // Nearest-rank percentile of the per-token extremes.
  const auto n = highs.size();
  const auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * static_cast<double>(n)));
  const auto idx = std::min(n - 1, rank == 0 ? 0 : rank - 1);
  std::sort(highs.begin(), highs.end());
  std::sort(lows.begin(), lows.end(), std::greater<>());
  QuantRange r{lows[idx], highs[idx]};
  if (symmetry == Symmetry::symmetric) r.lo = -r.hi;
  return r;
}

NoiseStats noise_stats(const Matrix& original, const Matrix& quantized) {
  if (original.rows() != quantized.rows() || original.cols() != quantized.cols()) {
    throw DimensionError("noise_stats: shapes differ");
  }
  if (original.rows() < 2) throw ValidationError("noise_stats needs at least 2 samples");

  const Matrix delta = original - quantized;
  const auto n = static_cast<double>(delta.rows());
  const Eigen::RowVectorXd mean = delta.colwise().mean();
  const Matrix centered = delta.rowwise() - mean;
  const Matrix cov = (centered.transpose() * centered) / (n - 1.0);

  const Eigen::RowVectorXd x_mean = original.colwise().mean();
  const Matrix x_centered = original.rowwise() - x_mean;

  NoiseStats s;
  const auto d = delta.cols();
  s.mean.resize(static_cast<std::size_t>(d));
  s.variance.resize(static_cast<std::size_t>(d));
  for (Eigen::Index i = 0; i < d; ++i) {
    s.mean[static_cast<std::size_t>(i)] = mean(i);
    s.variance[static_cast<std::size_t>(i)] = std::max(0.0, cov(i, i));
  }
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = i + 1; j < d; ++j) {
      const double denom = std::sqrt(cov(i, i) * cov(j, j));
      if (denom > 0.0) s.cross_channel_corr = std::max(s.cross_channel_corr, std::abs(cov(i, j)) / denom);
    }
    const double sx = x_centered.col(i).squaredNorm();
    const double sd = centered.col(i).squaredNorm();
    if (sx > 0.0 && sd > 0.0) {
      const double c = x_centered.col(i).dot(centered.col(i)) / std::sqrt(sx * sd);
      s.signal_noise_corr = std::max(s.signal_noise_corr, std::abs(c));
    }
  }
  return s;
}

}  // namespace qalign
