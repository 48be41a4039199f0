#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "icl_lab/model.hpp"
#include "icl_lab/train.hpp"

namespace icl::test {

/// Random small model. `scale` multiplies the GPT-style init so that the
/// nonlinearities are exercised; norm scales are drawn around 1.
ModelBundle random_model(const ModelConfig& cfg, std::uint64_t seed, double scale = 10.0);

ModelConfig small_config(int d = 32, int layers = 2, int heads = 4, int vocab = 16, int max_seq = 24);

TensorD random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double stddev = 1.0);
std::vector<TokenId> random_tokens(int n, int vocab, std::mt19937_64& rng);

double max_abs_diff(std::span<const float> a, std::span<const float> b);
double max_abs_diff(std::span<const double> a, std::span<const double> b);

}  // namespace icl::test
