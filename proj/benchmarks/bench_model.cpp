#include <random>

#include <benchmark/benchmark.h>

#include "icl_lab/model.hpp"

namespace {

// The toy configuration used by the experiments, random weights.
const icl::ModelBundle& toy() {
  static const icl::ModelBundle m = [] {
    icl::ModelBundle b;
    b.config.vocab_size = 256;
    std::mt19937_64 rng(7);
    b.weights = icl::init_weights(b.config, rng);
    for (int i = 0; i < b.config.vocab_size; ++i) b.vocab.push_back("t" + std::to_string(i));
    return b;
  }();
  return m;
}

std::vector<icl::TokenId> tokens(int n) {
  std::mt19937_64 rng(static_cast<std::uint64_t>(n));
  std::uniform_int_distribution<int> u(0, toy().config.vocab_size - 1);
  std::vector<icl::TokenId> t(static_cast<std::size_t>(n));
  for (auto& x : t) x = u(rng);
  return t;
}

void BM_ForwardLastLogits(benchmark::State& state) {
  const auto t = tokens(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(icl::forward(toy(), t, {}, {}, icl::LogitPositions::kLast));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardLastLogits)->Arg(16)->Arg(64)->Arg(128);

void BM_ForwardHeadAblation(benchmark::State& state) {
  const auto t = tokens(64);
  icl::InterventionSpec iv;
  iv.ablate = {icl::HeadId{1, 2}};
  for (auto _ : state) benchmark::DoNotOptimize(icl::forward(toy(), t, {}, iv, icl::LogitPositions::kLast));
}
BENCHMARK(BM_ForwardHeadAblation);

void BM_GreedyDecode(benchmark::State& state) {
  const auto t = tokens(64);
  for (auto _ : state) benchmark::DoNotOptimize(icl::greedy_decode(toy(), t, 2));
}
BENCHMARK(BM_GreedyDecode);

void BM_HeadContribution(benchmark::State& state) {
  const auto t = tokens(64);
  for (auto _ : state) benchmark::DoNotOptimize(icl::head_contribution(toy(), t, icl::HeadId{2, 0}));
}
BENCHMARK(BM_HeadContribution);

}  // namespace
BENCHMARK_MAIN();
