#include <benchmark/benchmark.h>

#include "qalign/metrics.hpp"
#include "qalign/spd.hpp"
#include "qalign/synth.hpp"
#include "qalign/transforms.hpp"

namespace {

qalign::ActivationSet make_x(std::size_t d, std::size_t n) {
  qalign::DistSpec spec;
  spec.covariance.type = qalign::CovarianceSpec::Type::random_spd;
  spec.covariance.condition_number = 100.0;
  return qalign::gen_activations(d, n, spec, qalign::Seed{7});
}

void BM_Fwht(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const auto x = make_x(d, 256);
  for (auto _ : state) {
    auto y = qalign::apply_fwht(x);
    benchmark::DoNotOptimize(y.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_Fwht)->Arg(64)->Arg(256)->Arg(1024);

void BM_DenseHadamard(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  qalign::Matrix x = make_x(d, 256).data();
  const qalign::Matrix h = qalign::hadamard_matrix(d);
  for (auto _ : state) {
    qalign::Matrix y = x * h.transpose();
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_DenseHadamard)->Arg(64)->Arg(256)->Arg(1024);

void BM_GeometricMean(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  qalign::Rng rng(3);
  const qalign::SpdMatrix a(qalign::random_spd(d, 100.0, rng));
  const qalign::SpdMatrix b(qalign::random_spd(d, 100.0, rng));
  for (auto _ : state) {
    auto g = qalign::geometric_mean(a, b);
    benchmark::DoNotOptimize(g.matrix().data());
  }
}
BENCHMARK(BM_GeometricMean)->Arg(32)->Arg(128)->Arg(256);

void BM_AnalyzeLayer(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const auto x = make_x(d, 1024);
  const auto layer = qalign::gen_layer("w", d, d, qalign::FamilySpec{}, qalign::Seed{11});
  const auto cfg_w = qalign::QuantConfig::weights(4, qalign::Symmetry::symmetric);
  const auto cfg_a = qalign::QuantConfig::activations(4, qalign::Symmetry::asymmetric);
  for (auto _ : state) {
    auto a = qalign::analyze_layer(layer, x, cfg_w, cfg_a);
    benchmark::DoNotOptimize(a.alignment);
  }
}
BENCHMARK(BM_AnalyzeLayer)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
