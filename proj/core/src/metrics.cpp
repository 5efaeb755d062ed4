#include "qalign/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "qalign/error.hpp"
#include "qalign/rng.hpp"
#include "qalign/spd.hpp"

namespace qalign {

Decibel Decibel::from_ratio(double ratio) {
  if (!(ratio > 0.0) || !std::isfinite(ratio)) {
    throw UndefinedMetricError("cannot express ratio " + std::to_string(ratio) + " in dB");
  }
  return {10.0 * std::log10(ratio)};
}

double Decibel::to_ratio() const { return std::pow(10.0, value / 10.0); }

Ratio::Ratio(double value) : value_(value) {
  if (!(value >= 0.0) || !std::isfinite(value)) {
    throw ValidationError("ratio must be finite and non-negative, got " + std::to_string(value));
  }
}

double Ratio::value() const {
  if (exact_) throw UndefinedMetricError("ratio is exact (unbounded)");
  return value_;
}

Decibel Ratio::db() const { return Decibel::from_ratio(value()); }

std::string Ratio::db_string(int decimals) const {
  if (exact_) return "exact";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, db().value);
  return buf;
}

Ratio sqnr(const Matrix& signal_out, const Matrix& noisy_out) {
  if (signal_out.rows() != noisy_out.rows() || signal_out.cols() != noisy_out.cols()) {
    throw DimensionError("sqnr: signal is " + std::to_string(signal_out.rows()) + "x" +
                         std::to_string(signal_out.cols()) + ", noisy output is " +
                         std::to_string(noisy_out.rows()) + "x" + std::to_string(noisy_out.cols()));
  }
  const double signal = signal_out.squaredNorm();
  if (!(signal > 0.0)) throw UndefinedMetricError("sqnr: signal energy is zero");
  const double error = (signal_out - noisy_out).squaredNorm();
  if (error == 0.0) return Ratio::exact();
  return Ratio(signal / error);
}

Ratio parallel(Ratio a, Ratio b) {
  if (a.is_exact()) return b;
  if (b.is_exact()) return a;
  if (!(a.value() > 0.0) || !(b.value() > 0.0)) {
    throw ValidationError("parallel: inputs must be positive");
  }
  return Ratio(1.0 / (1.0 / a.value() + 1.0 / b.value()));
}

namespace {

// Sum of squared norms over sum of squared range widths, one group per row.
Ratio energy_over_range(const Matrix& m, Symmetry symmetry, const char* what) {
  const auto cols = static_cast<std::size_t>(m.cols());
  double energy = 0.0;
  double range_sq = 0.0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const QuantRange q = compute_range({m.row(r).data(), cols}, symmetry);
    energy += m.row(r).squaredNorm();
    range_sq += q.width() * q.width();
  }
  if (range_sq == 0.0) {
    if (energy > 0.0) return Ratio::exact();
    throw UndefinedMetricError(std::string(what) + ": all groups are zero");
  }
  return Ratio(energy / range_sq);
}

Ratio energy_over_fixed_ranges(const Matrix& m, const QuantConfig& cfg, const char* what) {
  double energy = m.squaredNorm();
  double range_sq = 0.0;
  const auto rows = static_cast<std::size_t>(m.rows());
  if (cfg.granularity == Granularity::per_tensor) {
    QuantRange r;
    if (cfg.policy == RangePolicy::static_ranges) {
      r = cfg.static_ranges.at(0);
    } else {
      r = compute_range({m.data(), static_cast<std::size_t>(m.size())}, cfg.symmetry);
    }
    range_sq = static_cast<double>(rows) * r.width() * r.width();
  } else {
    if (cfg.static_ranges.size() != rows) {
      throw ValidationError(std::string(what) + ": static ranges do not cover every group");
    }
    for (const auto& r : cfg.static_ranges) range_sq += r.width() * r.width();
  }
  if (range_sq == 0.0) {
    if (energy > 0.0) return Ratio::exact();
    throw UndefinedMetricError(std::string(what) + ": all groups are zero");
  }
  return Ratio(energy / range_sq);
}

}  // namespace

Ratio concentration_activations(const ActivationSet& x, Symmetry symmetry) {
  return energy_over_range(x.data(), symmetry, "activation concentration");
}

Ratio concentration_activations(const ActivationSet& x, const QuantConfig& cfg) {
  if (cfg.granularity != Granularity::per_tensor && cfg.policy == RangePolicy::dynamic) {
    return concentration_activations(x, cfg.symmetry);
  }
  return energy_over_fixed_ranges(x.data(), cfg, "activation concentration");
}

Ratio concentration_weights(const Matrix& w, Symmetry symmetry) {
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    if ((w.row(r).array() == 0.0).all()) {
      throw ValidationError("weight concentration: row " + std::to_string(r) + " is all zeros");
    }
  }
  return energy_over_range(w, symmetry, "weight concentration");
}

Ratio concentration_weights(const Matrix& w, const QuantConfig& cfg) {
  if (cfg.granularity != Granularity::per_tensor && cfg.policy == RangePolicy::dynamic) {
    return concentration_weights(w, cfg.symmetry);
  }
  return energy_over_fixed_ranges(w, cfg, "weight concentration");
}

Autocorrelation autocorrelation(const ActivationSet& x) {
  const Matrix& m = x.data();
  Matrix s = (m.transpose() * m) / static_cast<double>(m.rows());
  Autocorrelation out;
  out.matrix = 0.5 * (s + s.transpose());
  out.sample_count = x.tokens();
  return out;
}

Matrix regularized(const Autocorrelation& sigma, double eps) {
  if (!(eps >= 0.0)) throw ValidationError("regularization eps must be >= 0");
  const auto d = sigma.matrix.rows();
  const double shift = eps * sigma.trace() / static_cast<double>(d);
  Matrix out = sigma.matrix;
  out.diagonal().array() += shift;
  return out;
}

double alignment(const Matrix& w, const Matrix& sigma_x) {
  if (sigma_x.rows() != w.cols() || sigma_x.cols() != w.cols()) {
    throw DimensionError("alignment: weight has " + std::to_string(w.cols()) +
                         " inputs, autocorrelation is " + std::to_string(sigma_x.rows()) + "x" +
                         std::to_string(sigma_x.cols()));
  }
  const double w_energy = w.squaredNorm();
  const double x_energy = sigma_x.trace();
  if (!(w_energy > 0.0) || !(x_energy > 0.0)) {
    throw UndefinedMetricError("alignment: zero weight norm or zero activation energy");
  }
  // tr(W Sigma W^T) without forming W^T W.
  const double output_energy = (w * sigma_x).cwiseProduct(w).sum();
  return output_energy / (w_energy * x_energy);
}

double alignment(const Matrix& w, const Autocorrelation& sigma_x) {
  return alignment(w, sigma_x.matrix);
}

double alignment_sampled(const Matrix& w, const ActivationSet& x) {
  const Matrix y = layer_outputs(w, x.data());
  const double n = static_cast<double>(x.tokens());
  const double w_energy = w.squaredNorm();
  const double x_energy = x.data().squaredNorm() / n;
  if (!(w_energy > 0.0) || !(x_energy > 0.0)) {
    throw UndefinedMetricError("alignment: zero weight norm or zero activation energy");
  }
  return (y.squaredNorm() / n) / (w_energy * x_energy);
}

namespace {

Matrix psd_sqrt(const Matrix& m) {
  const EigenDecomposition e = sym_eig(m);
  const Vector root = e.values.cwiseMax(0.0).cwiseSqrt();
  Matrix out = e.vectors * root.asDiagonal() * e.vectors.transpose();
  return 0.5 * (out + out.transpose());
}

}  // namespace

double max_alignment(const Matrix& w, const Matrix& sigma_x) {
  if (sigma_x.rows() != w.cols() || sigma_x.cols() != w.cols()) {
    throw DimensionError("max_alignment: weight has " + std::to_string(w.cols()) +
                         " inputs, autocorrelation is " + std::to_string(sigma_x.rows()) + "x" +
                         std::to_string(sigma_x.cols()));
  }
  // Sigma_y = W Sigma_x W^T shares its nonzero spectrum with
  // Sigma_x^{1/2} W^T W Sigma_x^{1/2}; diagonalize whichever is smaller.
  Matrix output_cov;
  if (w.rows() <= w.cols()) {
    output_cov = w * sigma_x * w.transpose();
  } else {
    const Matrix root = psd_sqrt(sigma_x);
    output_cov = root * (w.transpose() * w) * root;
  }
  output_cov = 0.5 * (output_cov + output_cov.transpose());
  const EigenDecomposition e = sym_eig(output_cov);
  double sum_lambda = 0.0;
  double sum_root = 0.0;
  for (Eigen::Index i = 0; i < e.values.size(); ++i) {
    const double lambda = std::max(e.values(i), 0.0);
    sum_lambda += lambda;
    sum_root += std::sqrt(lambda);
  }
  if (!(sum_root > 0.0)) throw UndefinedMetricError("max_alignment: layer output is identically zero");
  return sum_lambda / (sum_root * sum_root);
}

double max_alignment(const Matrix& w, const Autocorrelation& sigma_x) {
  return max_alignment(w, sigma_x.matrix);
}

namespace {

void require_positive_alignment(double a) {
  if (!(a > 0.0) || !std::isfinite(a)) {
    throw ValidationError("alignment must be positive, got " + std::to_string(a));
  }
}

Ratio single_side(int bits, Ratio c, double a) {
  require_positive_alignment(a);
  if (c.is_exact()) return Ratio::exact();
  if (!(c.value() > 0.0)) throw ValidationError("concentration must be positive");
  const double n = step_count(bits);
  return Ratio(12.0 * n * n * c.value() * a);
}

}  // namespace

Ratio predicted_sqnr_activations(int b_x, Ratio c_x, double a) { return single_side(b_x, c_x, a); }

Ratio predicted_sqnr_weights(int b_w, Ratio c_w, double a) { return single_side(b_w, c_w, a); }

Ratio predicted_sqnr(int b_x, int b_w, Ratio c_x, Ratio c_w, double a) {
  return parallel(predicted_sqnr_activations(b_x, c_x, a), predicted_sqnr_weights(b_w, c_w, a));
}

Ratio sqnr_ratio_r(int b_x, int b_w, Ratio c_x, Ratio c_w) {
  const Ratio act = predicted_sqnr_activations(b_x, c_x, 1.0);
  const Ratio wgt = predicted_sqnr_weights(b_w, c_w, 1.0);
  if (act.is_exact() && wgt.is_exact()) return Ratio(1.0);
  if (act.is_exact()) return Ratio::exact();
  if (wgt.is_exact()) return Ratio(0.0);
  return Ratio(act.value() / wgt.value());
}

ReferenceConcentration reference_concentration(const FamilySpec& family, std::size_t d,
                                               Symmetry symmetry, std::size_t trials,
                                               std::uint64_t seed) {
  if (trials < 1000) throw ValidationError("reference_concentration needs at least 1000 trials");
  if (d < 1) throw ValidationError("reference_concentration needs d >= 1");
  family.validate();
  Rng rng = Rng::derive(seed, "reference/" + family.name() + "/" + std::to_string(d));

  std::vector<double> energy(trials), range_sq(trials), v(d);
  for (std::size_t t = 0; t < trials; ++t) {
    double e = 0.0;
    for (auto& x : v) {
      x = family.draw(rng);
      e += x * x;
    }
    const QuantRange r = compute_range(v, symmetry);
    energy[t] = e;
    range_sq[t] = r.width() * r.width();
  }
  const double n = static_cast<double>(trials);
  double mean_e = 0.0, mean_r = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    mean_e += energy[t];
    mean_r += range_sq[t];
  }
  mean_e /= n;
  mean_r /= n;
  const double ratio = mean_e / mean_r;
  double resid = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const double z = energy[t] - ratio * range_sq[t];
    resid += z * z;
  }
  const double se = std::sqrt(resid / (n - 1.0) / n) / mean_r;

  ReferenceConcentration out;
  out.value = ratio;
  out.std_error = se;
  out.per_channel = ratio / static_cast<double>(d);
  out.per_channel_std_error = se / static_cast<double>(d);
  return out;
}

std::optional<double> LayerAnalysis::gap_db() const {
  if (sqnr_predicted.is_exact() && sqnr_measured_joint.is_exact()) return 0.0;
  if (sqnr_predicted.is_exact() || sqnr_measured_joint.is_exact()) return std::nullopt;
  return sqnr_predicted.db().value - sqnr_measured_joint.db().value;
}

LayerAnalysis analyze_layer(const LinearLayer& layer, const ActivationSet& x, const QuantConfig& cfg_w,
                            const QuantConfig& cfg_a) {
  require_paired(layer, x);
  const Matrix& w = layer.weight();

  const QuantizedMatrix xq = quantize_activations(x, cfg_a);
  const QuantizedMatrix wq = quantize_weights(w, cfg_w);

  const Matrix y = layer_outputs(w, x.data());
  LayerAnalysis a;
  a.b_x = cfg_a.bits;
  a.b_w = cfg_w.bits;
  a.sqnr_measured_act_only = sqnr(y, layer_outputs(w, xq.values));
  a.sqnr_measured_w_only = sqnr(y, layer_outputs(wq.values, x.data()));
  a.sqnr_measured_joint = sqnr(y, layer_outputs(wq.values, xq.values));

  a.c_x = concentration_activations(x, cfg_a);
  a.c_w = concentration_weights(w, cfg_w);
  const Autocorrelation sigma = autocorrelation(x);
  a.alignment = alignment(w, sigma);
  a.max_alignment = max_alignment(w, sigma);
  a.sqnr_predicted = predicted_sqnr(a.b_x, a.b_w, a.c_x, a.c_w, a.alignment);
  a.r = sqnr_ratio_r(a.b_x, a.b_w, a.c_x, a.c_w);

  a.degenerate_groups = xq.degenerate_groups + wq.degenerate_groups;
  a.clipped_tokens = xq.clipped_groups;

  const Eigen::VectorXd token_energy = y.rowwise().squaredNorm();
  const double total = token_energy.sum();
  a.max_token_signal_share = total > 0.0 ? token_energy.maxCoeff() / total : 0.0;

  if (a.degenerate_groups > 0) a.flags.emplace_back("degenerate");
  if (static_cast<double>(xq.clipped_groups) > 0.01 * static_cast<double>(x.tokens()) ||
      wq.clipped_groups > 0) {
    a.flags.emplace_back("clipping");
  }
  if (cfg_a.percentile_calibrated || cfg_w.percentile_calibrated) a.flags.emplace_back("percentile_range");
  if (x.tokens() >= 20 && a.max_token_signal_share > 0.5) a.flags.emplace_back("dominant_token");
  return a;
}

}  // namespace qalign
