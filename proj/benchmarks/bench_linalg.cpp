#include <random>

#include <benchmark/benchmark.h>

#include "icl_lab/linalg.hpp"

namespace {

icl::TensorD gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  icl::TensorD t(icl::Shape{rows, cols});
  for (auto& v : t.span()) v = n(rng);
  return t;
}

void BM_SymEig(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const auto cov = icl::linalg::covariance(gaussian(4 * d, d, 1));
  for (auto _ : state) benchmark::DoNotOptimize(icl::linalg::sym_eig(cov));
}
BENCHMARK(BM_SymEig)->Arg(16)->Arg(64)->Arg(128);

void BM_Svd(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const auto a = gaussian(d, d / 2, 2);
  for (auto _ : state) benchmark::DoNotOptimize(icl::linalg::svd(a));
}
BENCHMARK(BM_Svd)->Arg(16)->Arg(128);

// A cloud of 512 residuals at d = 128, the size the experiments use.
void BM_CovarianceAndPca(benchmark::State& state) {
  const auto points = gaussian(512, 128, 3);
  for (auto _ : state) benchmark::DoNotOptimize(icl::linalg::pca(points, 8));
}
BENCHMARK(BM_CovarianceAndPca);

void BM_Matmul(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const auto a = gaussian(d, d, 4);
  const auto b = gaussian(d, d, 5);
  for (auto _ : state) benchmark::DoNotOptimize(icl::linalg::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * d * d * d));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(512);

}  // namespace
