#include "icl_lab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace icl {

void ModelConfig::validate() const {
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 || max_seq < 1) {
    throw SpecError("model config: all sizes must be >= 1");
  }
  if (d_model % n_heads != 0) throw SpecError("model config: d_model must be divisible by n_heads");
  if (!(norm_eps > 0.0)) throw SpecError("model config: norm_eps must be positive");
}

std::string to_string(const HeadId& h) {
  return "L" + std::to_string(h.layer) + "H" + std::to_string(h.head);
}

std::map<std::string, Shape> expected_shapes(const ModelConfig& cfg) {
  const auto d = std::size_t(cfg.d_model);
  const auto f = std::size_t(cfg.d_ff);
  const auto v = std::size_t(cfg.vocab_size);
  std::map<std::string, Shape> out;
  out["tok_emb"] = {v, d};
  out["pos_emb"] = {std::size_t(cfg.max_seq), d};
  for (int i = 0; i < cfg.n_layers; ++i) {
    const auto p = "layers." + std::to_string(i) + ".";
    out[p + "attn_norm"] = {d};
    out[p + "wq"] = {d, d};
    out[p + "wk"] = {d, d};
    out[p + "wv"] = {d, d};
    out[p + "wo"] = {d, d};
    out[p + "mlp_norm"] = {d};
    out[p + "w_up"] = {d, f};
    out[p + "w_down"] = {f, d};
  }
  out["final_norm"] = {d};
  out["unembed"] = {d, v};
  return out;
}

template <class T>
template <class U>
ModelWeights<U> ModelWeights<T>::cast() const {
  ModelWeights<U> out;
  out.tok_emb = tok_emb.template cast<U>();
  out.pos_emb = pos_emb.template cast<U>();
  out.layers.resize(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& s = layers[i];
    auto& t = out.layers[i];
    t.attn_norm = s.attn_norm.template cast<U>();
    t.wq = s.wq.template cast<U>();
    t.wk = s.wk.template cast<U>();
    t.wv = s.wv.template cast<U>();
    t.wo = s.wo.template cast<U>();
    t.mlp_norm = s.mlp_norm.template cast<U>();
    t.w_up = s.w_up.template cast<U>();
    t.w_down = s.w_down.template cast<U>();
  }
  out.final_norm = final_norm.template cast<U>();
  out.unembed = unembed.template cast<U>();
  return out;
}

template <class T>
ModelWeights<T> ModelWeights<T>::zeros_like(const ModelConfig& cfg) {
  ModelWeights<T> w;
  w.layers.resize(std::size_t(cfg.n_layers));
  const auto shapes = expected_shapes(cfg);
  w.for_each([&](const std::string& name, Tensor<T>& t) { t = Tensor<T>(shapes.at(name)); });
  return w;
}

template struct ModelWeights<float>;
template struct ModelWeights<double>;
template ModelWeights<double> ModelWeights<float>::cast<double>() const;
template ModelWeights<float> ModelWeights<double>::cast<float>() const;
template ModelWeights<float> ModelWeights<float>::cast<float>() const;

std::uint64_t ModelBundle::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  weights.for_each([&](const std::string&, const TensorF& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < t.size() * sizeof(float); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  });
  return h;
}

void ModelBundle::validate() const {
  config.validate();
  if (weights.layers.size() != std::size_t(config.n_layers)) {
    throw ShapeMismatch("model has " + std::to_string(weights.layers.size()) + " layers, config says " +
                        std::to_string(config.n_layers));
  }
  const auto shapes = expected_shapes(config);
  weights.for_each([&](const std::string& name, const TensorF& t) {
    if (t.shape() != shapes.at(name)) {
      throw ShapeMismatch(name + ": shape " + shape_string(t.shape()) + ", expected " +
                          shape_string(shapes.at(name)));
    }
  });
  if (!vocab.empty() && vocab.size() != std::size_t(config.vocab_size)) {
    throw ShapeMismatch("vocabulary size does not match config.vocab_size");
  }
}

ModelWeights<float> init_weights(const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  auto w = ModelWeights<float>::zeros_like(cfg);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double base = 0.02;
  const double resid = base / std::sqrt(2.0 * cfg.n_layers);
  w.for_each([&](const std::string& name, TensorF& t) {
    if (name.ends_with("norm")) {
      std::fill(t.span().begin(), t.span().end(), 1.0f);
      return;
    }
    const double std = (name.ends_with(".wo") || name.ends_with(".w_down")) ? resid : base;
    for (auto& v : t.span()) v = static_cast<float>(std * normal(rng));
  });
  return w;
}

template <class T>
T gelu(T x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  return T(0.5) * x * (T(1) + std::tanh(k * (x + c * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
  constexpr T k = T(0.7978845608028654);
  constexpr T c = T(0.044715);
  const T inner = k * (x + c * x * x * x);
  const T th = std::tanh(inner);
  const T sech2 = T(1) - th * th;
  return T(0.5) * (T(1) + th) + T(0.5) * x * sech2 * k * (T(1) + T(3) * c * x * x);
}

template float gelu<float>(float);
template double gelu<double>(double);
template float gelu_grad<float>(float);
template double gelu_grad<double>(double);

template <class T>
const Tensor<T>& Trace<T>::at(int layer, TraceKind kind) const {
  auto it = tensors.find({layer, kind});
  if (it == tensors.end()) {
    throw SpecError("trace has no capture for layer " + std::to_string(layer));
  }
  return it->second;
}

template struct Trace<float>;
template struct Trace<double>;

void InterventionSpec::validate(const ModelConfig& cfg) const {
  if (injection) {
    if (injection->layer < 0 || injection->layer >= cfg.n_layers) {
      throw InvalidIntervention("filter injection layer out of range");
    }
    injection->filter.validate();
    if (injection->filter.d() != cfg.d_model) {
      throw InvalidIntervention("filter width does not match d_model");
    }
  }
  for (const auto& h : ablate) {
    if (h.layer < 0 || h.layer >= cfg.n_layers || h.head < 0 || h.head >= cfg.n_heads) {
      throw InvalidIntervention("ablated head " + to_string(h) + " out of range");
    }
  }
  if (perturb) {
    if (perturb->layer < 0 || perturb->layer >= cfg.n_layers) {
      throw InvalidIntervention("perturbation layer out of range");
    }
    if (perturb->delta.size() != std::size_t(cfg.d_model)) {
      throw InvalidIntervention("perturbation delta must have d_model entries");
    }
  }
  for (int l : zero_attention_layers) {
    if (l < 0 || l >= cfg.n_layers) throw InvalidIntervention("zeroed attention layer out of range");
  }
}

namespace {

template <class T>
using Mat = RowMatrix<T>;

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

template <class T>
Mat<T> rmsnorm_rows(const Mat<T>& x, const Tensor<T>& scale, double eps) {
  Mat<T> y(x.rows(), x.cols());
  const auto g = scale.mat();
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T ms = x.row(i).squaredNorm() / T(x.cols());
    const T rstd = T(1) / std::sqrt(ms + T(eps));
    y.row(i) = (x.row(i) * rstd).cwiseProduct(g);
  }
  return y;
}

}  // namespace

template <class T>
ForwardResult<T> forward(const ModelConfig& cfg, const ModelWeights<T>& w, std::span<const TokenId> tokens,
                         const TraceSpec& trace, const InterventionSpec& iv, LogitPositions positions) {
  const auto n = static_cast<Eigen::Index>(tokens.size());
  if (n == 0) throw SpecError("forward: empty token sequence");
  if (n > cfg.max_seq) {
    throw SequenceTooLong("sequence of " + std::to_string(n) + " tokens exceeds max_seq " +
                          std::to_string(cfg.max_seq));
  }
  iv.validate(cfg);
  for (auto t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) throw SpecError("forward: token id out of range");
  }

  const Eigen::Index d = cfg.d_model;
  const int dh = cfg.head_dim();
  const T inv_sqrt_dh = T(1) / std::sqrt(T(dh));

  std::vector<std::vector<bool>> ablated(cfg.n_layers, std::vector<bool>(cfg.n_heads, false));
  for (const auto& h : iv.ablate) ablated[h.layer][h.head] = true;

  Eigen::Index inj_pos = -1;
  int inj_layer = cfg.n_layers;
  Mat<T> w_enc, w_dec;
  RowVector<T> b_enc;
  if (iv.injection) {
    inj_pos = iv.injection->position < 0 ? n - 1 : iv.injection->position;
    if (inj_pos >= n) throw InvalidIntervention("injection position beyond the sequence");
    inj_layer = iv.injection->layer;
    w_enc = iv.injection->filter.w_enc.mat().template cast<T>();
    w_dec = iv.injection->filter.w_dec.mat().template cast<T>();
    b_enc = iv.injection->filter.b_enc.mat().template cast<T>();
  }

  ForwardResult<T> out;
  Mat<T> x(n, d);
  const auto tok = w.tok_emb.mat();
  const auto pos = w.pos_emb.mat();
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = tok.row(tokens[i]) + pos.row(i);

  Mat<T> scores(n, n);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& L = w.layers[l];
    const bool blocked = l > inj_layer;
    const Mat<T> a = rmsnorm_rows(x, L.attn_norm, cfg.norm_eps);
    const Mat<T> q = a * L.wq.mat();
    const Mat<T> k = a * L.wk.mat();
    const Mat<T> v = a * L.wv.mat();
    Mat<T> o = Mat<T>::Zero(n, d);

    const bool keep_attn = contains(trace.attention_layers, l);
    Tensor<T> attn_capture;
    if (keep_attn) attn_capture = Tensor<T>(Shape{std::size_t(cfg.n_heads), std::size_t(n), std::size_t(n)});

    for (int h = 0; h < cfg.n_heads; ++h) {
      scores.noalias() = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * inv_sqrt_dh;
      for (Eigen::Index i = 0; i < n; ++i) {
        const bool self_only = blocked && i == inj_pos;
        const Eigen::Index lo = self_only ? i : 0;
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = lo; j <= i; ++j) mx = std::max(mx, scores(i, j));
        T sum = 0;
        for (Eigen::Index j = 0; j < n; ++j) {
          if (j < lo || j > i) {
            scores(i, j) = 0;
          } else {
            scores(i, j) = std::exp(scores(i, j) - mx);
            sum += scores(i, j);
          }
        }
        for (Eigen::Index j = lo; j <= i; ++j) scores(i, j) /= sum;
      }
      if (keep_attn) {
        std::copy(scores.data(), scores.data() + n * n, attn_capture.data() + std::size_t(h) * n * n);
      }
      if (!ablated[l][h]) o.middleCols(h * dh, dh).noalias() = scores * v.middleCols(h * dh, dh);
    }
    if (keep_attn) out.trace.tensors[{l, TraceKind::kAttention}] = std::move(attn_capture);
    if (contains(trace.head_output_layers, l)) {
      out.trace.tensors[{l, TraceKind::kHeadOutput}] = Tensor<T>::from_matrix(o);
    }

    Mat<T> attn_out = o * L.wo.mat();
    if (contains(iv.zero_attention_layers, l)) attn_out.setZero();
    if (contains(trace.attention_output_layers, l)) {
      out.trace.tensors[{l, TraceKind::kAttentionOutput}] = Tensor<T>::from_matrix(attn_out);
    }
    x += attn_out;

    const Mat<T> m = rmsnorm_rows(x, L.mlp_norm, cfg.norm_eps);
    Mat<T> u = m * L.w_up.mat();
    u = u.unaryExpr([](T z) { return gelu(z); });
    x.noalias() += u * L.w_down.mat();

    if (l == inj_layer) {
      const RowVector<T> z = x.row(inj_pos) * w_enc + b_enc;
      x.row(inj_pos) = z * w_dec;
    }
    if (iv.perturb && iv.perturb->layer == l) {
      for (Eigen::Index j = 0; j < d; ++j) x(iv.perturb->position, j) += T(iv.perturb->delta[j]);
    }
    if (contains(trace.residual_layers, l)) {
      out.trace.tensors[{l, TraceKind::kResidual}] =
          trace.residual_all_positions ? Tensor<T>::from_matrix(x) : Tensor<T>::from_matrix(x.row(n - 1));
    }
  }

  if (positions == LogitPositions::kLast) {
    const Mat<T> last = x.row(n - 1);
    out.logits = Tensor<T>::from_matrix(rmsnorm_rows(last, w.final_norm, cfg.norm_eps) * w.unembed.mat());
  } else {
    out.logits = Tensor<T>::from_matrix(rmsnorm_rows(x, w.final_norm, cfg.norm_eps) * w.unembed.mat());
  }
  return out;
}

template ForwardResult<float> forward<float>(const ModelConfig&, const ModelWeights<float>&,
                                             std::span<const TokenId>, const TraceSpec&,
                                             const InterventionSpec&, LogitPositions);
template ForwardResult<double> forward<double>(const ModelConfig&, const ModelWeights<double>&,
                                               std::span<const TokenId>, const TraceSpec&,
                                               const InterventionSpec&, LogitPositions);

ForwardResult<float> forward(const ModelBundle& model, std::span<const TokenId> tokens, const TraceSpec& trace,
                             const InterventionSpec& intervention, LogitPositions positions) {
  return forward<float>(model.config, model.weights, tokens, trace, intervention, positions);
}

TokenId argmax_lowest(std::span<const float> logits) {
  if (logits.empty()) throw SpecError("argmax over empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

std::vector<TokenId> greedy_decode(const ModelBundle& model, std::span<const TokenId> tokens, int n_steps,
                                   const InterventionSpec& intervention) {
  if (n_steps < 1) throw SpecError("greedy_decode: n_steps must be >= 1");
  std::vector<TokenId> seq(tokens.begin(), tokens.end());
  InterventionSpec iv = intervention;
  if (iv.injection && iv.injection->position < 0) {
    iv.injection->position = static_cast<int>(tokens.size()) - 1;
  }
  std::vector<TokenId> out;
  out.reserve(std::size_t(n_steps));
  for (int s = 0; s < n_steps; ++s) {
    const auto res = forward(model, seq, {}, iv, LogitPositions::kLast);
    const auto next = argmax_lowest(res.logits.span());
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

TensorF head_contribution(const ModelBundle& model, std::span<const TokenId> tokens, HeadId head) {
  const auto& cfg = model.config;
  if (head.layer < 0 || head.layer >= cfg.n_layers || head.head < 0 || head.head >= cfg.n_heads) {
    throw SpecError("head_contribution: head out of range");
  }
  TraceSpec spec;
  spec.head_output_layers = {head.layer};
  const auto res = forward(model, tokens, spec, {}, LogitPositions::kLast);
  const auto o = res.trace.at(head.layer, TraceKind::kHeadOutput).mat();
  const int dh = cfg.head_dim();
  const auto wo = model.weights.layers[head.layer].wo.mat();
  RowMatrix<float> contrib = o.middleCols(head.head * dh, dh) * wo.middleRows(head.head * dh, dh);
  return TensorF::from_matrix(contrib);
}

}  // namespace icl
