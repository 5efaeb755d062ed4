#include "qalign/transforms.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>

#include "qalign/error.hpp"
#include "qalign/rng.hpp"
#include "qalign/synth.hpp"

namespace qalign {

bool is_power_of_two(std::size_t d) { return d > 0 && std::has_single_bit(d); }

namespace {

void require_power_of_two(std::size_t d) {
  if (!is_power_of_two(d)) {
    throw ValidationError("Hadamard transform needs a power-of-two dimension, got " + std::to_string(d) +
                          "; use random_orthogonal (ortho:<seed>) instead");
  }
}

std::string format_alpha(double alpha) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", alpha);
  return buf;
}

double parse_double(const std::string& text, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || text.empty()) throw ValidationError("bad " + what + " '" + text + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& text, const std::string& what) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || text.empty() || text[0] == '-') {
    throw ValidationError("bad " + what + " '" + text + "'");
  }
  return v;
}

}  // namespace

void TransformSpec::validate(std::size_t d) const {
  switch (kind) {
    case TransformKind::channel_scaling:
      if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("channel scaling alpha must be in [0, 1]");
      break;
    case TransformKind::hadamard:
      require_power_of_two(d);
      break;
    case TransformKind::cat_block:
      if (block_size == 0 || d % block_size != 0) {
        throw ValidationError("cat block size " + std::to_string(block_size) + " does not divide " +
                              std::to_string(d));
      }
      if (hadamard_after) require_power_of_two(d);
      break;
    default:
      break;
  }
}

std::string TransformSpec::id() const {
  switch (kind) {
    case TransformKind::identity:
      return "none";
    case TransformKind::channel_scaling:
      return "scale:" + format_alpha(alpha);
    case TransformKind::hadamard:
      return "hadamard";
    case TransformKind::random_orthogonal:
      return "ortho:" + std::to_string(seed);
    case TransformKind::optimal_full:
      return "opt";
    case TransformKind::cat_block:
      return "cat:" + std::to_string(block_size) + (hadamard_after ? "+h" : "");
    case TransformKind::diag_ratio_sqrt:
      return "diag-sqrt";
  }
  return "?";
}

TransformSpec TransformSpec::parse(const std::string& text) {
  TransformSpec s;
  const auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
  if (colon != std::string::npos && arg.empty()) throw ValidationError("transform '" + text + "' has an empty argument");
  if (head == "none" || head == "identity") {
    s.kind = TransformKind::identity;
  } else if (head == "hadamard") {
    s.kind = TransformKind::hadamard;
  } else if (head == "opt") {
    s.kind = TransformKind::optimal_full;
  } else if (head == "diag-sqrt") {
    s.kind = TransformKind::diag_ratio_sqrt;
  } else if (head == "scale") {
    s.kind = TransformKind::channel_scaling;
    s.alpha = arg.empty() ? 0.5 : parse_double(arg, "scaling alpha");
    if (!(s.alpha >= 0.0 && s.alpha <= 1.0)) throw ValidationError("scaling alpha must be in [0, 1]");
    return s;
  } else if (head == "ortho") {
    s.kind = TransformKind::random_orthogonal;
    s.seed = arg.empty() ? 0 : parse_u64(arg, "orthogonal seed");
    return s;
  } else if (head == "cat") {
    s.kind = TransformKind::cat_block;
    std::string k = arg;
    // Accept both "cat:128+h" and "cat:128,+h".
    for (const char* suffix : {",+h", "+h"}) {
      const std::string sfx(suffix);
      if (k.size() > sfx.size() && k.compare(k.size() - sfx.size(), sfx.size(), sfx) == 0) {
        s.hadamard_after = true;
        k.resize(k.size() - sfx.size());
        break;
      }
    }
    s.block_size = k.empty() ? 128 : static_cast<std::size_t>(parse_u64(k, "block size"));
    if (s.block_size == 0) throw ValidationError("block size must be positive");
    return s;
  } else {
    throw ValidationError("unknown transform '" + text + "'");
  }
  if (!arg.empty()) throw ValidationError("transform '" + head + "' takes no argument");
  return s;
}

AppliedTransform AppliedTransform::from_pair(Matrix forward, Matrix inverse) {
  if (forward.rows() != forward.cols() || inverse.rows() != forward.rows() ||
      inverse.cols() != forward.cols()) {
    throw DimensionError("transform and inverse must be square and of equal size");
  }
  AppliedTransform t;
  const Matrix product = forward * inverse;
  t.residual = max_abs(product - Matrix::Identity(forward.rows(), forward.cols()));
  t.forward = std::move(forward);
  t.inverse = std::move(inverse);
  return t;
}

AppliedTransform AppliedTransform::identity(std::size_t d) {
  const auto n = static_cast<Eigen::Index>(d);
  return from_pair(Matrix::Identity(n, n), Matrix::Identity(n, n));
}

Matrix hadamard_matrix(std::size_t d) {
  require_power_of_two(d);
  const auto n = static_cast<Eigen::Index>(d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix h(n, n);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          (std::popcount(i & j) % 2 == 0) ? scale : -scale;
  return h;
}

void fwht_inplace(std::span<double> v) {
  const std::size_t len = v.size();
  require_power_of_two(len);
  for (std::size_t h = 1; h < len; h *= 2) {
    for (std::size_t i = 0; i < len; i += 2 * h) {
      for (std::size_t j = i; j < i + h; ++j) {
        const double a = v[j];
        const double b = v[j + h];
        v[j] = a + b;
        v[j + h] = a - b;
      }
    }
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(len));
  for (auto& x : v) x *= scale;
}

ActivationSet apply_fwht(const ActivationSet& x) {
  require_power_of_two(x.channels());
  Matrix out = x.data();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    fwht_inplace({out.row(r).data(), static_cast<std::size_t>(out.cols())});
  }
  return ActivationSet(std::move(out));
}

ChannelScales channel_scales(const Matrix& w, const ActivationSet& x, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("channel scaling alpha must be in [0, 1]");
  if (static_cast<std::size_t>(w.cols()) != x.channels()) {
    throw DimensionError("channel scaling: weight has " + std::to_string(w.cols()) +
                         " inputs, activations have " + std::to_string(x.channels()) + " channels");
  }
  const Eigen::RowVectorXd act_max = x.data().cwiseAbs().colwise().maxCoeff();
  const Eigen::RowVectorXd w_max = w.cwiseAbs().colwise().maxCoeff();
  ChannelScales out;
  out.scales.resize(x.channels(), 1.0);
  for (std::size_t i = 0; i < x.channels(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    const double s = std::pow(act_max(c), alpha) / std::pow(w_max(c), 1.0 - alpha);
    if (std::isfinite(s) && s > 0.0) {
      out.scales[i] = s;
    } else {
      out.flagged_channels.push_back(i);
    }
  }
  return out;
}

AppliedTransform channel_scaling(const Matrix& w, const ActivationSet& x, double alpha) {
  const ChannelScales cs = channel_scales(w, x, alpha);
  const auto d = static_cast<Eigen::Index>(cs.scales.size());
  Matrix forward = Matrix::Zero(d, d);
  Matrix inverse = Matrix::Zero(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    forward(i, i) = 1.0 / cs.scales[static_cast<std::size_t>(i)];
    inverse(i, i) = cs.scales[static_cast<std::size_t>(i)];
  }
  AppliedTransform t = AppliedTransform::from_pair(std::move(forward), std::move(inverse));
  t.flagged_channels = cs.flagged_channels;
  return t;
}

AlignmentTransform optimal_alignment_pair(const SpdMatrix& sigma_w, const SpdMatrix& sigma_x) {
  if (sigma_w.dim() != sigma_x.dim()) {
    throw DimensionError("optimal alignment: Sigma_w is " + std::to_string(sigma_w.dim()) +
                         "-dimensional, Sigma_x is " + std::to_string(sigma_x.dim()));
  }
  const SpdMatrix g = geometric_mean(sigma_w, spd_power(sigma_x, -1.0));
  return {spd_power(g, 0.5), spd_power(g, -0.5)};
}

Matrix optimal_alignment_transform(const SpdMatrix& sigma_w, const SpdMatrix& sigma_x) {
  return optimal_alignment_pair(sigma_w, sigma_x).transform.matrix();
}

AppliedTransform cat_block(const Matrix& w, const Matrix& sigma_x, std::size_t k, bool hadamard_after) {
  const auto d = static_cast<std::size_t>(w.cols());
  if (static_cast<std::size_t>(sigma_x.rows()) != d || static_cast<std::size_t>(sigma_x.cols()) != d) {
    throw DimensionError("cat_block: weight has " + std::to_string(d) +
                         " inputs, autocorrelation is " + std::to_string(sigma_x.rows()) + "x" +
                         std::to_string(sigma_x.cols()));
  }
  if (k == 0 || d % k != 0) {
    throw ValidationError("cat_block: block size " + std::to_string(k) + " does not divide " +
                          std::to_string(d));
  }
  if (hadamard_after) require_power_of_two(d);

  const Matrix sigma_w = w.transpose() * w;
  const auto n = static_cast<Eigen::Index>(d);
  const auto kb = static_cast<Eigen::Index>(k);
  Matrix m = Matrix::Zero(n, n);
  Matrix m_inv = Matrix::Zero(n, n);
  for (Eigen::Index start = 0; start < n; start += kb) {
    const SpdMatrix block_w(Matrix(sigma_w.block(start, start, kb, kb)));
    const SpdMatrix block_x(Matrix(sigma_x.block(start, start, kb, kb)));
    const AlignmentTransform pair = optimal_alignment_pair(block_w, block_x);
    m.block(start, start, kb, kb) = pair.transform.matrix();
    m_inv.block(start, start, kb, kb) = pair.inverse.matrix();
  }
  if (!hadamard_after) return AppliedTransform::from_pair(std::move(m), std::move(m_inv));

  const Matrix h = hadamard_matrix(d);
  return AppliedTransform::from_pair(h * m, m_inv * h);
}

AppliedTransform diagonal_alignment(const Matrix& w, const Matrix& sigma_x, bool optimal) {
  const auto d = w.cols();
  if (sigma_x.rows() != d || sigma_x.cols() != d) {
    throw DimensionError("diagonal alignment: dimension mismatch");
  }
  const Eigen::RowVectorXd col_energy = w.colwise().squaredNorm();
  Matrix forward = Matrix::Zero(d, d);
  Matrix inverse = Matrix::Zero(d, d);
  std::vector<std::size_t> flagged;
  for (Eigen::Index i = 0; i < d; ++i) {
    const double ratio = col_energy(i) / sigma_x(i, i);
    double m = optimal ? std::pow(ratio, 0.25) : std::sqrt(ratio);
    if (!std::isfinite(m) || !(m > 0.0)) {
      m = 1.0;
      flagged.push_back(static_cast<std::size_t>(i));
    }
    forward(i, i) = m;
    inverse(i, i) = 1.0 / m;
  }
  AppliedTransform t = AppliedTransform::from_pair(std::move(forward), std::move(inverse));
  t.flagged_channels = std::move(flagged);
  return t;
}

AppliedTransform build_transform(const TransformSpec& spec, const LinearLayer& layer,
                                 const ActivationSet& x, double eps) {
  require_paired(layer, x);
  const std::size_t d = x.channels();
  spec.validate(d);
  const Matrix& w = layer.weight();

  switch (spec.kind) {
    case TransformKind::identity:
      return AppliedTransform::identity(d);
    case TransformKind::channel_scaling:
      return channel_scaling(w, x, spec.alpha);
    case TransformKind::hadamard: {
      Matrix h = hadamard_matrix(d);
      AppliedTransform t = AppliedTransform::from_pair(h, h);
      t.pure_hadamard = true;
      return t;
    }
    case TransformKind::random_orthogonal: {
      Rng rng = Rng::derive(spec.seed, "orthogonal");
      Matrix q = random_orthogonal(d, rng);
      Matrix qt = q.transpose();
      return AppliedTransform::from_pair(std::move(q), std::move(qt));
    }
    case TransformKind::optimal_full: {
      const SpdMatrix sigma_w(Matrix(w.transpose() * w));
      const SpdMatrix sigma_x(regularized(autocorrelation(x), eps));
      const AlignmentTransform pair = optimal_alignment_pair(sigma_w, sigma_x);
      return AppliedTransform::from_pair(pair.transform.matrix(), pair.inverse.matrix());
    }
    case TransformKind::cat_block:
      return cat_block(w, regularized(autocorrelation(x), eps), spec.block_size, spec.hadamard_after);
    case TransformKind::diag_ratio_sqrt:
      return diagonal_alignment(w, regularized(autocorrelation(x), eps), false);
  }
  return AppliedTransform::identity(d);
}

ActivationSet transform_activations(const ActivationSet& x, const AppliedTransform& t) {
  if (t.dim() != x.channels()) {
    throw DimensionError("transform is " + std::to_string(t.dim()) + "-dimensional, activations have " +
                         std::to_string(x.channels()) + " channels");
  }
  if (t.pure_hadamard) return apply_fwht(x);
  Matrix out = x.data() * t.forward.transpose();
  return ActivationSet(std::move(out));
}

std::pair<LinearLayer, ActivationSet> apply_transform(const LinearLayer& layer, const ActivationSet& x,
                                                      const AppliedTransform& t) {
  require_paired(layer, x);
  if (t.dim() != x.channels()) {
    throw DimensionError("transform is " + std::to_string(t.dim()) + "-dimensional, layer has " +
                         std::to_string(x.channels()) + " inputs");
  }
  if (!(t.residual <= kMaxTransformResidual)) {
    throw NumericalError("transform residual |T T^-1 - I| = " + std::to_string(t.residual) +
                         " exceeds " + std::to_string(kMaxTransformResidual));
  }
  Matrix w = layer.weight() * t.inverse;
  ActivationSet xt = transform_activations(x, t);

  // Spot-check output preservation on a prefix of the tokens.
  const Eigen::Index probe = std::min<Eigen::Index>(static_cast<Eigen::Index>(x.tokens()), 256);
  const Matrix before = layer_outputs(layer.weight(), x.data().topRows(probe));
  const Matrix after = layer_outputs(w, xt.data().topRows(probe));
  const double scale = max_abs(before);
  const double deviation = max_abs(before - after);
  if (deviation > 1e-8 * std::max(scale, 1e-300)) {
    throw NumericalError("transform changes layer '" + layer.name() + "' outputs by " +
                         std::to_string(deviation / std::max(scale, 1e-300)) + " relative");
  }
  return {LinearLayer(layer.name(), std::move(w), layer.group()), std::move(xt)};
}

LinearLayer group_layers(std::span<const LinearLayer> layers) {
  if (layers.empty()) throw ValidationError("group_layers: no layers");
  if (layers.size() == 1) return layers.front();
  const auto d_in = layers.front().in_features();
  Eigen::Index rows = 0;
  std::string name;
  for (const auto& l : layers) {
    if (l.in_features() != d_in) {
      throw ValidationError("group_layers: '" + l.name() + "' has " + std::to_string(l.in_features()) +
                            " inputs, expected " + std::to_string(d_in));
    }
    if (l.group() != layers.front().group()) {
      throw ValidationError("group_layers: '" + l.name() + "' belongs to a different group");
    }
    rows += static_cast<Eigen::Index>(l.out_features());
    name += (name.empty() ? "" : "+") + l.name();
  }
  Matrix stacked(rows, static_cast<Eigen::Index>(d_in));
  Eigen::Index at = 0;
  for (const auto& l : layers) {
    stacked.middleRows(at, l.weight().rows()) = l.weight();
    at += l.weight().rows();
  }
  return LinearLayer(std::move(name), std::move(stacked), layers.front().group());
}

}  // namespace qalign
