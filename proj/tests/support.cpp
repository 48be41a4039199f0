#include "support.hpp"

#include <algorithm>
#include <cmath>

namespace icl::test {

ModelConfig small_config(int d, int layers, int heads, int vocab, int max_seq) {
  ModelConfig c;
  c.d_model = d;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_ff = 4 * d;
  c.vocab_size = vocab;
  c.max_seq = max_seq;
  return c;
}

ModelBundle random_model(const ModelConfig& cfg, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  ModelBundle m;
  m.config = cfg;
  m.weights = init_weights(cfg, rng);
  std::uniform_real_distribution<double> around_one(0.5, 1.5);
  m.weights.for_each([&](const std::string& name, TensorF& t) {
    for (auto& v : t.span()) v = name.ends_with("norm") ? float(around_one(rng)) : float(v * scale);
  });
  for (int i = 0; i < cfg.vocab_size; ++i) m.vocab.push_back("t" + std::to_string(i));
  return m;
}

TensorD random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  TensorD t(Shape{rows, cols});
  for (auto& v : t.span()) v = n(rng);
  return t;
}

std::vector<TokenId> random_tokens(int n, int vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, vocab - 1);
  std::vector<TokenId> out(static_cast<std::size_t>(n));
  for (auto& t : out) t = u(rng);
  return out;
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return a.size() == b.size() ? m : INFINITY;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

}  // namespace icl::test
