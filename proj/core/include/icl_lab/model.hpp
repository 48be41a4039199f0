#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "icl_lab/filter.hpp"
#include "icl_lab/tensor.hpp"

namespace icl {

struct ModelConfig {
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 512;
  int vocab_size = 0;
  int max_seq = 128;
  double norm_eps = 1e-5;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct HeadId {
  int layer = 0;
  int head = 0;
  friend auto operator<=>(const HeadId&, const HeadId&) = default;
};

std::string to_string(const HeadId& h);

template <class T>
struct LayerWeights {
  Tensor<T> attn_norm;  // d
  Tensor<T> wq, wk, wv, wo;  // d×d, applied as x·W
  Tensor<T> mlp_norm;  // d
  Tensor<T> w_up;  // d×d_ff
  Tensor<T> w_down;  // d_ff×d
};

template <class T>
struct ModelWeights {
  Tensor<T> tok_emb;  // vocab×d
  Tensor<T> pos_emb;  // max_seq×d
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm;  // d
  Tensor<T> unembed;  // d×vocab

  /// Visits every tensor with its canonical name, in a fixed order.
  template <class F>
  void for_each(F&& f) {
    f(std::string("tok_emb"), tok_emb);
    f(std::string("pos_emb"), pos_emb);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto p = "layers." + std::to_string(i) + ".";
      auto& l = layers[i];
      f(p + "attn_norm", l.attn_norm);
      f(p + "wq", l.wq);
      f(p + "wk", l.wk);
      f(p + "wv", l.wv);
      f(p + "wo", l.wo);
      f(p + "mlp_norm", l.mlp_norm);
      f(p + "w_up", l.w_up);
      f(p + "w_down", l.w_down);
    }
    f(std::string("final_norm"), final_norm);
    f(std::string("unembed"), unembed);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<ModelWeights*>(this)->for_each(
        [&](const std::string& name, Tensor<T>& t) { f(name, static_cast<const Tensor<T>&>(t)); });
  }

  template <class U>
  ModelWeights<U> cast() const;

  static ModelWeights zeros_like(const ModelConfig& cfg);
};

/// Shape every named tensor must have under cfg.
std::map<std::string, Shape> expected_shapes(const ModelConfig& cfg);

struct ModelBundle {
  ModelConfig config;
  ModelWeights<float> weights;
  std::vector<std::string> vocab;
  /// Opaque JSON describing the synthetic world the model was trained on;
  /// empty when unknown.
  std::string task_json;

  /// FNV-1a over all weight bytes; used to assert the model stayed frozen.
  std::uint64_t checksum() const;
  void validate() const;
};

/// GPT-2 style init: N(0, 0.02), output projections scaled by 1/sqrt(2L),
/// norm scales at 1.
ModelWeights<float> init_weights(const ModelConfig& cfg, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Forward with capture and interventions.

enum class TraceKind {
  kResidual,         // post-block residual
  kAttention,        // n_heads×T×T attention probabilities
  kHeadOutput,       // T×d concatenated head outputs before W_o
  kAttentionOutput,  // T×d attention sublayer output (after W_o)
};

struct TraceSpec {
  std::vector<int> residual_layers;
  bool residual_all_positions = false;  // else last position only (1×d)
  std::vector<int> attention_layers;
  std::vector<int> head_output_layers;
  std::vector<int> attention_output_layers;

  static TraceSpec none() { return {}; }
  static TraceSpec last_residual(int layer) {
    TraceSpec s;
    s.residual_layers = {layer};
    return s;
  }
};

template <class T>
struct Trace {
  std::map<std::pair<int, TraceKind>, Tensor<T>> tensors;

  bool contains(int layer, TraceKind kind) const { return tensors.count({layer, kind}) != 0; }
  const Tensor<T>& at(int layer, TraceKind kind) const;
};

struct FilterInjection {
  TVSFilter filter;
  int layer = 0;
  /// Position whose residual is filtered; -1 means the final position.
  int position = -1;
};

/// Test hook: adds delta to one position's residual after a block.
struct ResidualPerturbation {
  int layer = 0;
  int position = 0;
  std::vector<double> delta;
};

struct InterventionSpec {
  std::optional<FilterInjection> injection;
  std::vector<HeadId> ablate;
  std::optional<ResidualPerturbation> perturb;
  /// Test hook: replaces the attention sublayer output of these layers with 0.
  std::vector<int> zero_attention_layers;

  bool empty() const {
    return !injection && ablate.empty() && !perturb && zero_attention_layers.empty();
  }
  void validate(const ModelConfig& cfg) const;
};

enum class LogitPositions { kAll, kLast };

template <class T>
struct ForwardResult {
  Tensor<T> logits;  // seq×vocab, or 1×vocab for kLast
  Trace<T> trace;
};

template <class T>
ForwardResult<T> forward(const ModelConfig& cfg, const ModelWeights<T>& weights,
                         std::span<const TokenId> tokens, const TraceSpec& trace = {},
                         const InterventionSpec& intervention = {},
                         LogitPositions positions = LogitPositions::kAll);

ForwardResult<float> forward(const ModelBundle& model, std::span<const TokenId> tokens,
                             const TraceSpec& trace = {}, const InterventionSpec& intervention = {},
                             LogitPositions positions = LogitPositions::kAll);

/// Iterated argmax over the whole vocabulary, ties to the lowest id. A
/// filter injection stays pinned to the prompt's final position.
std::vector<TokenId> greedy_decode(const ModelBundle& model, std::span<const TokenId> tokens,
                                   int n_steps, const InterventionSpec& intervention = {});

TokenId argmax_lowest(std::span<const float> logits);

/// Additive contribution of one head to its layer's attention sublayer
/// output (T×d), from a clean run.
TensorF head_contribution(const ModelBundle& model, std::span<const TokenId> tokens, HeadId head);

// ---------------------------------------------------------------------------
// Elementwise primitives shared with the backward code.

template <class T>
T gelu(T x);
template <class T>
T gelu_grad(T x);

}  // namespace icl
