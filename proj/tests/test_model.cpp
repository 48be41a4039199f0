#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "icl_lab/model_io.hpp"
#include "support.hpp"

using namespace icl;

namespace {

const auto kCfg = test::small_config(32, 3, 4, 16, 24);

std::vector<float> last_logits(const ModelBundle& m, const std::vector<TokenId>& toks, const InterventionSpec& iv = {}) {
  const auto r = forward(m, toks, {}, iv, LogitPositions::kLast);
  return r.logits.values();
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("icl_lab_test_" + name);
}

}  // namespace

TEST_CASE("identity filter on a single-token prompt reproduces the clean run") {
  const auto m = test::random_model(kCfg, 1);
  for (int layer = 0; layer < kCfg.n_layers; ++layer) {
    InterventionSpec iv;
    iv.injection = FilterInjection{TVSFilter::identity(kCfg.d_model, layer), layer, -1};
    CHECK(test::max_abs_diff(last_logits(m, {5}), last_logits(m, {5}, iv)) <= 1e-5);
  }
}

TEST_CASE("empty ablation set is bit-identical to the clean run") {
  const auto m = test::random_model(kCfg, 2);
  std::mt19937_64 rng(2);
  const auto toks = test::random_tokens(12, kCfg.vocab_size, rng);
  InterventionSpec iv;
  const auto a = forward(m, toks).logits;
  const auto b = forward(m, toks, {}, iv).logits;
  CHECK(a == b);
}

TEST_CASE("context blocking: earlier positions cannot reach the filtered last token") {
  const auto m = test::random_model(kCfg, 3);
  const auto md = m.weights.cast<double>();
  std::mt19937_64 rng(3);
  const auto toks = test::random_tokens(10, kCfg.vocab_size, rng);
  for (int layer = 0; layer < kCfg.n_layers; ++layer) {
    std::mt19937_64 frng(30 + layer);
    InterventionSpec iv;
    iv.injection = FilterInjection{TVSFilter::random(kCfg.d_model, 4, layer, frng, 0.2), layer, -1};
    const auto base = forward<double>(kCfg, md, toks, {}, iv, LogitPositions::kLast).logits;
    for (int p : {0, 4, 8}) {
      auto pert = iv;
      std::vector<double> delta(std::size_t(kCfg.d_model));
      std::normal_distribution<double> n(0, 3.0);
      for (auto& v : delta) v = n(rng);
      pert.perturb = ResidualPerturbation{layer, p, delta};
      const auto moved = forward<double>(kCfg, md, toks, {}, pert, LogitPositions::kLast).logits;
      CHECK(test::max_abs_diff(base.span(), moved.span()) <= 1e-12);
    }
  }
}

TEST_CASE("perturbing earlier positions does change logits without injection") {
  const auto m = test::random_model(kCfg, 4);
  const auto md = m.weights.cast<double>();
  std::vector<TokenId> toks{1, 2, 3, 4, 5, 6};
  const auto base = forward<double>(kCfg, md, toks, {}, {}, LogitPositions::kLast).logits;
  InterventionSpec iv;
  iv.perturb = ResidualPerturbation{0, 2, std::vector<double>(std::size_t(kCfg.d_model), 1.0)};
  const auto moved = forward<double>(kCfg, md, toks, {}, iv, LogitPositions::kLast).logits;
  CHECK(test::max_abs_diff(base.span(), moved.span()) > 1e-6);
}

TEST_CASE("ablating every head of a layer equals zeroing its attention output") {
  const auto m = test::random_model(kCfg, 5);
  std::mt19937_64 rng(5);
  const auto toks = test::random_tokens(11, kCfg.vocab_size, rng);
  for (int layer = 0; layer < kCfg.n_layers; ++layer) {
    InterventionSpec ablate, zero;
    for (int h = 0; h < kCfg.n_heads; ++h) ablate.ablate.push_back({layer, h});
    zero.zero_attention_layers = {layer};
    const auto a = forward(m, toks, {}, ablate).logits;
    const auto b = forward(m, toks, {}, zero).logits;
    CHECK(test::max_abs_diff(a.span(), b.span()) <= 1e-6);
  }
}

TEST_CASE("head contributions decompose the attention sublayer") {
  const auto m = test::random_model(kCfg, 6);
  std::mt19937_64 rng(6);
  const auto toks = test::random_tokens(9, kCfg.vocab_size, rng);
  for (int layer = 0; layer < kCfg.n_layers; ++layer) {
    TraceSpec spec;
    spec.attention_output_layers = {layer};
    spec.residual_layers = {layer};
    spec.residual_all_positions = true;
    const auto clean = forward(m, toks, spec);
    const auto& out = clean.trace.at(layer, TraceKind::kAttentionOutput);
    TensorF sum(out.shape());
    for (int h = 0; h < kCfg.n_heads; ++h) {
      const auto c = head_contribution(m, toks, {layer, h});
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += c[i];
    }
    CHECK(test::max_abs_diff(sum.span(), out.span()) <= 1e-5);

    // Ablating head h changes the layer's attention output by exactly its
    // contribution; the residual after the block then differs by it plus
    // the MLP reaction, so compare the attention output directly.
    const HeadId h{layer, 1};
    InterventionSpec iv;
    iv.ablate = {h};
    const auto ablated = forward(m, toks, spec, iv);
    const auto& aout = ablated.trace.at(layer, TraceKind::kAttentionOutput);
    const auto c = head_contribution(m, toks, h);
    TensorF expect(out.shape());
    for (std::size_t i = 0; i < expect.size(); ++i) expect[i] = out[i] - c[i];
    CHECK(test::max_abs_diff(aout.span(), expect.span()) <= 1e-5);
  }
}

TEST_CASE("one-head layer: the contribution is the whole sublayer output") {
  const auto cfg = test::small_config(16, 1, 1, 10, 8);
  const auto m = test::random_model(cfg, 7);
  const std::vector<TokenId> toks{1, 4, 2, 7};
  TraceSpec spec;
  spec.attention_output_layers = {0};
  const auto out = forward(m, toks, spec).trace.at(0, TraceKind::kAttentionOutput);
  CHECK(test::max_abs_diff(head_contribution(m, toks, {0, 0}).span(), out.span()) <= 1e-6);
}

TEST_CASE("causality: a later token never changes earlier logits") {
  const auto m = test::random_model(kCfg, 8);
  const auto md = m.weights.cast<double>();
  std::vector<TokenId> a{1, 2, 3, 4, 5, 6, 7};
  auto b = a;
  b[4] = 11;
  const auto la = forward<double>(kCfg, md, a).logits;
  const auto lb = forward<double>(kCfg, md, b).logits;
  const auto v = std::size_t(kCfg.vocab_size);
  CHECK(test::max_abs_diff(std::span(la.data(), 4 * v), std::span(lb.data(), 4 * v)) <= 1e-12);
}

TEST_CASE("attention rows are probability vectors") {
  const auto m = test::random_model(kCfg, 9);
  std::mt19937_64 rng(9);
  const auto toks = test::random_tokens(13, kCfg.vocab_size, rng);
  TraceSpec spec;
  spec.attention_layers = {0, 1, 2};
  const auto r = forward(m, toks, spec);
  for (int l = 0; l < 3; ++l) {
    const auto& a = r.trace.at(l, TraceKind::kAttention);
    REQUIRE(a.shape() == Shape{4, 13, 13});
    for (std::size_t h = 0; h < 4; ++h) {
      for (std::size_t i = 0; i < 13; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 13; ++j) {
          const float p = a[(h * 13 + i) * 13 + j];
          CHECK(p >= 0.0f);
          if (j > i) CHECK(p == 0.0f);
          s += p;
        }
        CHECK(std::abs(s - 1.0) <= 1e-5);
      }
    }
  }
}

TEST_CASE("zero filter makes the last-token logits independent of the prompt") {
  const auto m = test::random_model(kCfg, 10);
  std::mt19937_64 rng(10);
  InterventionSpec iv;
  iv.injection = FilterInjection{TVSFilter::zero(kCfg.d_model, 3, 1), 1, -1};
  const auto ref = last_logits(m, test::random_tokens(7, kCfg.vocab_size, rng), iv);
  for (int t = 0; t < 5; ++t) {
    const auto other = last_logits(m, test::random_tokens(3 + t * 2, kCfg.vocab_size, rng), iv);
    // Positional embeddings differ with length but are lost with the residual.
    CHECK(test::max_abs_diff(ref, other) <= 1e-6);
  }
}

TEST_CASE("trace capture is observation-only") {
  const auto m = test::random_model(kCfg, 11);
  std::mt19937_64 rng(11);
  const auto toks = test::random_tokens(10, kCfg.vocab_size, rng);
  TraceSpec spec;
  spec.residual_layers = {0, 1, 2};
  spec.residual_all_positions = true;
  spec.attention_layers = {0, 2};
  spec.head_output_layers = {1};
  spec.attention_output_layers = {2};
  CHECK(forward(m, toks).logits == forward(m, toks, spec).logits);
}

TEST_CASE("greedy decoding: argmax with lowest-id tie break") {
  CHECK(argmax_lowest(std::vector<float>{0, 1, 5, 2, 5}) == 2);
  std::vector<float> tie(12, 0.0f);
  tie[3] = tie[9] = 1.0f;
  CHECK(argmax_lowest(tie) == 3);

  // A model whose logits are constant with a unique max at id 7: zero every
  // weight and put the max in the unembedding via a constant residual.
  auto cfg = test::small_config(8, 1, 2, 10, 16);
  ModelBundle m;
  m.config = cfg;
  m.weights = ModelWeights<float>::zeros_like(cfg);
  for (auto& v : m.weights.final_norm.span()) v = 1.0f;
  for (auto& v : m.weights.layers[0].attn_norm.span()) v = 1.0f;
  for (auto& v : m.weights.layers[0].mlp_norm.span()) v = 1.0f;
  for (std::size_t i = 0; i < 10; ++i) m.weights.tok_emb(i, 0) = 1.0f;
  for (std::size_t i = 0; i < 16; ++i) m.weights.pos_emb(i, 0) = 1.0f;
  m.weights.unembed(0, 7) = 2.0f;
  m.weights.unembed(0, 2) = 1.0f;
  for (int i = 0; i < 10; ++i) m.vocab.push_back("w" + std::to_string(i));
  CHECK(greedy_decode(m, std::vector<TokenId>{1, 2}, 3) == std::vector<TokenId>{7, 7, 7});
  CHECK_THROWS_AS(greedy_decode(m, std::vector<TokenId>{1}, 0), SpecError);
}

TEST_CASE("forward validates sequence length and interventions") {
  const auto m = test::random_model(kCfg, 12);
  CHECK_THROWS_AS(forward(m, std::vector<TokenId>(25, 1)), SequenceTooLong);
  InterventionSpec bad;
  bad.ablate = {{kCfg.n_layers, 0}};
  CHECK_THROWS_AS(forward(m, std::vector<TokenId>{1, 2}, {}, bad), InvalidIntervention);
  InterventionSpec bad_layer;
  bad_layer.injection = FilterInjection{TVSFilter::zero(kCfg.d_model, 2, 0), 7, -1};
  CHECK_THROWS_AS(forward(m, std::vector<TokenId>{1, 2}, {}, bad_layer), InvalidIntervention);
}

TEST_CASE("model container round-trips bit-exactly") {
  auto m = test::random_model(kCfg, 13);
  m.task_json = R"({"kind":"ambiguous_attributes"})";
  const auto path = temp_path("model.twb");
  save_model(m, path);
  const auto back = load_model(path);
  CHECK(back.config == m.config);
  CHECK(back.vocab == m.vocab);
  CHECK(back.checksum() == m.checksum());
  std::size_t i = 0;
  std::vector<const TensorF*> orig;
  m.weights.for_each([&](const std::string&, const TensorF& t) { orig.push_back(&t); });
  back.weights.for_each([&](const std::string&, const TensorF& t) { CHECK(t == *orig[i++]); });
  std::filesystem::remove(path);
}

TEST_CASE("model container errors are distinct") {
  const auto m = test::random_model(kCfg, 14);
  auto bytes = serialize_model(m);

  SUBCASE("magic") {
    auto b = bytes;
    b[0] = 'X';
    CHECK_THROWS_AS(deserialize_model(b), MagicMismatch);
  }
  SUBCASE("truncated") {
    auto b = bytes;
    b.resize(b.size() - 100);
    CHECK_THROWS_AS(deserialize_model(b), TruncatedPayload);
  }
  SUBCASE("shape mismatch against the config") {
    // Rewrite the header so the config claims d_model 64 while the tensors
    // are 32 wide.
    std::uint32_t len;
    std::memcpy(&len, bytes.data() + 4, 4);
    std::string header(bytes.data() + 8, len);
    const auto at = header.find("\"d_model\":32");
    REQUIRE(at != std::string::npos);
    header.replace(at, 12, "\"d_model\":64");
    std::vector<char> b(bytes.begin(), bytes.begin() + 4);
    const std::uint32_t nl = std::uint32_t(header.size());
    b.insert(b.end(), reinterpret_cast<const char*>(&nl), reinterpret_cast<const char*>(&nl) + 4);
    b.insert(b.end(), header.begin(), header.end());
    b.insert(b.end(), bytes.begin() + 8 + len, bytes.end());
    CHECK_THROWS_AS(deserialize_model(b), ShapeMismatch);
  }
}
