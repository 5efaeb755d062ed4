#include <cmath>

#include "doctest.h"

#include "qalign/error.hpp"
#include "qalign/metrics.hpp"
#include "qalign/spd.hpp"
#include "qalign/synth.hpp"
#include "test_util.hpp"

using namespace qalign;
using doctest::Approx;

namespace {

double db(double ratio) { return 10.0 * std::log10(ratio); }

ActivationSet correlated(std::size_t d, std::size_t n, double cond, std::uint64_t seed,
                         FamilySpec f = FamilySpec::gaussian()) {
  DistSpec spec;
  spec.family = f;
  spec.covariance.type = CovarianceSpec::Type::random_spd;
  spec.covariance.condition_number = cond;
  return gen_activations(d, n, spec, Seed{seed});
}

}  // namespace

TEST_CASE("sqnr definition") {
  Rng rng(1);
  const Matrix s = testutil::gaussian_matrix(50, 8, rng);
  CHECK(sqnr(s, s).is_exact());
  CHECK(sqnr(s, Matrix::Zero(50, 8)).value() == Approx(1.0).epsilon(1e-15));
  CHECK(sqnr(s, Matrix::Zero(50, 8)).db().value == Approx(0.0));
  // Per-token error with one hundredth of the token energy.
  Matrix noisy = s;
  for (Eigen::Index t = 0; t < s.rows(); ++t) {
    Eigen::RowVectorXd e = testutil::gaussian_matrix(1, 8, rng);
    e *= s.row(t).norm() / 10.0 / e.norm();
    noisy.row(t) += e;
  }
  CHECK(sqnr(s, noisy).db().value == Approx(20.0).epsilon(1e-12));
  CHECK_THROWS_AS(sqnr(Matrix::Zero(3, 3), Matrix::Ones(3, 3)), UndefinedMetricError);
}

TEST_CASE("parallel composition") {
  const Ratio a(37.5);
  CHECK(parallel(a, a).value() == Approx(18.75).epsilon(1e-15));
  CHECK(parallel(a, Ratio::exact()).value() == 37.5);
  CHECK(parallel(Ratio::exact(), Ratio::exact()).is_exact());
  const Ratio p = parallel(Ratio(Decibel{30.0}.to_ratio()), Ratio(Decibel{20.0}.to_ratio()));
  CHECK(p.db().value == Approx(db(1.0 / (1e-3 + 1e-2))).epsilon(1e-12));
  CHECK(p.db_string(2) == "19.59");
  CHECK(Ratio::exact().db_string(4) == "exact");
}

TEST_CASE("activation concentration extremes") {
  Matrix one_hot(1, 5);
  one_hot << 0, 0, -3.0, 0, 0;
  CHECK(concentration_activations(ActivationSet(one_hot), Symmetry::symmetric).value() == 0.25);
  CHECK(concentration_activations(ActivationSet(one_hot), Symmetry::symmetric).db().value ==
        Approx(-6.0206).epsilon(1e-4));

  const ActivationSet constant(Matrix::Constant(4, 6, 1.5));
  CHECK(concentration_activations(constant, Symmetry::asymmetric).is_exact());
  CHECK_THROWS_AS(concentration_activations(ActivationSet(Matrix::Zero(2, 3)), Symmetry::symmetric),
                  UndefinedMetricError);
}

TEST_CASE("gaussian tokens match the gaussian reference") {
  DistSpec spec;
  const ActivationSet x = gen_activations(4096, 400, spec, Seed{8});
  const auto ref = reference_concentration(FamilySpec::gaussian(), 4096, Symmetry::asymmetric, 1000, 3);
  CHECK(std::abs(concentration_activations(x, Symmetry::asymmetric).db().value - db(ref.value)) < 0.2);
}

TEST_CASE("weight concentration closed forms") {
  Matrix scaled_one_hot = Matrix::Zero(3, 4);
  scaled_one_hot(0, 1) = 2.0;
  scaled_one_hot(1, 3) = -0.5;
  scaled_one_hot(2, 0) = 7.0;
  CHECK(concentration_weights(scaled_one_hot, Symmetry::symmetric).value() == 0.25);

  for (int d : {4, 16, 64}) {
    Matrix h(1, 1);
    h << 1.0;
    while (h.rows() < d) {
      Matrix next(2 * h.rows(), 2 * h.cols());
      next << h, h, h, -h;
      h = next;
    }
    h /= std::sqrt(static_cast<double>(d));
    CHECK(concentration_weights(h, Symmetry::symmetric).value() == Approx(d / 4.0).epsilon(1e-13));
  }
}

TEST_CASE("autocorrelation") {
  SUBCASE("one-hot tokens cycling through channels") {
    const int d = 5;
    Matrix x = Matrix::Zero(3 * d, d);
    for (int t = 0; t < 3 * d; ++t) x(t, t % d) = 1.0;
    CHECK(max_abs(autocorrelation(ActivationSet(x)).matrix - Matrix::Identity(d, d) / d) < 1e-15);
  }
  SUBCASE("row duplication leaves it unchanged") {
    Rng rng(2);
    const Matrix x = testutil::gaussian_matrix(20, 4, rng);
    Matrix twice(40, 4);
    twice << x, x;
    CHECK(max_abs(autocorrelation(ActivationSet(x)).matrix - autocorrelation(ActivationSet(twice)).matrix) <
          1e-14);
  }
  SUBCASE("gaussian sample estimate") {
    DistSpec spec;
    spec.covariance.type = CovarianceSpec::Type::random_spd;
    spec.covariance.condition_number = 20.0;
    const Matrix s = shaping_matrix(8, spec.covariance, Seed{4});
    const Matrix k = s * s.transpose();
    const auto sigma = autocorrelation(gen_activations(8, 100000, spec, Seed{4}));
    CHECK(sigma.sample_count == 100000);
    CHECK(max_abs(sigma.matrix - k) <= 0.05 * max_abs(k));
  }
}

TEST_CASE("alignment closed forms and invariances") {
  CHECK(alignment(Matrix::Constant(1, 1, 3.0), Matrix::Constant(1, 1, 0.2)) == Approx(1.0).epsilon(1e-15));

  Rng rng(3);
  const Matrix w = testutil::gaussian_matrix(6, 9, rng);
  CHECK(alignment(w, Matrix(Matrix::Identity(9, 9))) == Approx(1.0 / 9.0).epsilon(1e-14));

  Matrix e1 = Matrix::Zero(1, 4);
  e1(0, 0) = 1.0;
  const Eigen::Vector4d lambda(3.0, 1.0, 0.5, 0.25);
  CHECK(alignment(e1, Matrix(lambda.asDiagonal())) == Approx(3.0 / lambda.sum()).epsilon(1e-15));

  const Matrix sigma = random_spd(9, 50.0, rng);
  const double a = alignment(w, sigma);
  CHECK(alignment(4.0 * w, Matrix(0.1 * sigma)) == Approx(a).epsilon(1e-13));
  const Matrix q = random_orthogonal(9, rng);
  CHECK(alignment(w * q.transpose(), Matrix(q * sigma * q.transpose())) == Approx(a).epsilon(1e-12));
}

TEST_CASE("alignment on samples equals the trace form") {
  const ActivationSet x = correlated(12, 3000, 30.0, 5);
  const LinearLayer layer = gen_layer("w", 7, 12, FamilySpec::gaussian(), Seed{6});
  const auto sigma = autocorrelation(x);
  CHECK(alignment_sampled(layer.weight(), x) == Approx(alignment(layer.weight(), sigma)).epsilon(1e-12));
  // tr(W^T W Sigma) = E||W x||^2.
  const Matrix y = layer_outputs(layer.weight(), x.data());
  const double lhs = (layer.weight().transpose() * layer.weight() * sigma.matrix).trace();
  CHECK(lhs == Approx(y.squaredNorm() / 3000.0).epsilon(1e-12));
}

TEST_CASE("max alignment") {
  CHECK(max_alignment(Matrix(Matrix::Identity(5, 5)), Matrix(Matrix::Identity(5, 5))) ==
        Approx(1.0 / 5.0).epsilon(1e-14));
  Matrix rank1 = Matrix::Zero(3, 3);
  rank1(0, 0) = 1.0;
  CHECK(max_alignment(Matrix(Matrix::Identity(3, 3)), rank1) == Approx(1.0).epsilon(1e-12));
  // Output spectrum (4, 1): 5 / (2 + 1)^2.
  Matrix w(2, 2);
  w << 2, 0, 0, 1;
  CHECK(max_alignment(w, Matrix(Matrix::Identity(2, 2))) == Approx(5.0 / 9.0).epsilon(1e-14));

  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    const Matrix wi = testutil::gaussian_matrix(5, 8, rng);
    const Matrix s = random_spd(8, 100.0, rng);
    CHECK(max_alignment(wi, s) >= alignment(wi, s));
    // Both branches (d_out <= d_in and d_out > d_in) agree on the spectrum.
    const Matrix tall = testutil::gaussian_matrix(8, 5, rng);
    const Matrix s5 = random_spd(5, 10.0, rng);
    const Matrix sy = tall * s5 * tall.transpose();
    const Eigen::SelfAdjointEigenSolver<Matrix> es(sy);
    // Rank is at most 5; the remaining eigenvalues are round-off.
    const Eigen::VectorXd lam = es.eigenvalues().tail(5);
    const double want = lam.sum() / std::pow(lam.cwiseSqrt().sum(), 2);
    CHECK(max_alignment(tall, s5) == Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("prediction arithmetic") {
  const Ratio one(1.0);
  const Ratio p = predicted_sqnr(4, 4, one, one, 1.0);
  CHECK(p.value() == Approx(1350.0).epsilon(1e-15));
  CHECK(p.db().value == Approx(31.3033).epsilon(1e-5));
  const double factor = predicted_sqnr(9, 9, one, one, 0.3).value() / predicted_sqnr(8, 8, one, one, 0.3).value();
  CHECK(factor == Approx(std::pow(511.0 / 255.0, 2)).epsilon(1e-14));
  CHECK(sqnr_ratio_r(6, 6, Ratio(0.37), Ratio(0.37)).value() == Approx(1.0).epsilon(1e-15));
  CHECK(predicted_sqnr(4, 4, Ratio::exact(), one, 1.0).value() ==
        Approx(predicted_sqnr_weights(4, one, 1.0).value()));

  // With r < 1 the activation side dominates, so activation bits pay more.
  const Ratio cx(0.02), cw(0.2);
  CHECK(sqnr_ratio_r(4, 4, cx, cw).value() < 1.0);
  const double base = predicted_sqnr(4, 4, cx, cw, 0.1).db().value;
  const double more_x = predicted_sqnr(8, 4, cx, cw, 0.1).db().value - base;
  const double more_w = predicted_sqnr(4, 8, cx, cw, 0.1).db().value - base;
  CHECK(more_x > more_w);
}

TEST_CASE("reference concentration") {
  const auto one = reference_concentration(FamilySpec::gaussian(), 1, Symmetry::symmetric, 1000, 1);
  CHECK(one.value == 0.25);
  CHECK(one.std_error == 0.0);

  double prev_per_channel = std::numeric_limits<double>::infinity();
  double prev_raw = 0.0;
  for (std::size_t d : {16u, 64u, 256u, 1024u}) {
    const auto r = reference_concentration(FamilySpec::gaussian(), d, Symmetry::asymmetric, 2000, 11);
    CHECK(r.per_channel < prev_per_channel);
    CHECK(r.value > prev_raw);
    CHECK(r.std_error > 0.0);
    CHECK(r.per_channel == Approx(r.value / d).epsilon(1e-15));
    prev_per_channel = r.per_channel;
    prev_raw = r.value;
  }
  const auto g = reference_concentration(FamilySpec::gaussian(), 1024, Symmetry::symmetric, 1000, 2);
  const auto l = reference_concentration(FamilySpec::laplace(), 1024, Symmetry::symmetric, 1000, 2);
  CHECK(l.value < g.value);
  CHECK_THROWS_AS(reference_concentration(FamilySpec::gaussian(), 8, Symmetry::symmetric, 10), ValidationError);
}

TEST_CASE("layer analysis") {
  SUBCASE("identity layer at high bits") {
    const LinearLayer eye("eye", Matrix::Identity(32, 32));
    DistSpec spec;
    const auto x = gen_activations(32, 2000, spec, Seed{2});
    const auto a = analyze_layer(eye, x, QuantConfig::weights(16), QuantConfig::activations(12));
    CHECK(a.sqnr_measured_joint.db().value > 60.0);
    CHECK(a.sqnr_predicted.db().value > 60.0);
    REQUIRE(a.gap_db().has_value());
    CHECK(std::abs(*a.gap_db()) < 1.0);
  }
  SUBCASE("identity weights carry deterministic off-grid error") {
    // The symmetric grid has no zero, so every off-diagonal zero moves by +s/2.
    // Row error is (s/2) sum_{j != i} x_j, so E||dW x||^2 = (s^2/4) d (d-1)
    // and measured SQNR = N^2 / (d-1). The prediction with C_W = 1/4, A = 1/d
    // is 3 N^2 / d, a ratio of d / (3 (d-1)) = 32/93 at d = 32.
    const LinearLayer eye("eye", Matrix::Identity(32, 32));
    DistSpec spec;
    const auto x = gen_activations(32, 20000, spec, Seed{2});
    const auto a = analyze_layer(eye, x, QuantConfig::weights(16), QuantConfig::activations(16));
    CHECK(a.sqnr_measured_w_only.db().value > 60.0);
    const double predicted_w = predicted_sqnr_weights(16, a.c_w, a.alignment).db().value;
    CHECK(a.sqnr_measured_w_only.db().value - predicted_w == Approx(db(32.0 / 93.0)).epsilon(0.02));
  }
  SUBCASE("joint sqnr composes in parallel") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto x = correlated(64, 2048, 100.0, seed);
      const auto layer = gen_layer("w", 64, 64, FamilySpec::gaussian(), Seed{seed + 100});
      for (int b : {4, 6, 8}) {
        const auto a = analyze_layer(layer, x, QuantConfig::weights(b), QuantConfig::activations(b));
        const double composed = parallel(a.sqnr_measured_act_only, a.sqnr_measured_w_only).db().value;
        CHECK(std::abs(a.sqnr_measured_joint.db().value - composed) < 1.0);
      }
    }
  }
  SUBCASE("heavy-tailed activations are the bottleneck at W4A4") {
    DistSpec spec;
    spec.family = FamilySpec::student_t(3.0);
    spec.outliers = {{0, 20.0}, {5, 10.0}};
    const auto x = gen_activations(128, 2048, spec, Seed{7});
    const auto layer = gen_layer("w", 128, 128, FamilySpec::gaussian(), Seed{8});
    const auto a = analyze_layer(layer, x, QuantConfig::weights(4), QuantConfig::activations(4));
    CHECK(a.r.value() < 1.0);
    CHECK(a.sqnr_measured_act_only.value() < a.sqnr_measured_w_only.value());
  }
  SUBCASE("gap is zero when both sides are exact") {
    LayerAnalysis a;
    a.sqnr_predicted = Ratio::exact();
    a.sqnr_measured_joint = Ratio::exact();
    CHECK(a.gap_db() == 0.0);
    a.sqnr_measured_joint = Ratio(10.0);
    CHECK_FALSE(a.gap_db().has_value());
  }
}
