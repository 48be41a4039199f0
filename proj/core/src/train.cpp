#include "icl_lab/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "icl_lab/eval.hpp"
#include "icl_lab/parallel.hpp"
#include "icl_lab/rng.hpp"

namespace icl {

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw SpecError("train config: learning rate must be positive");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw SpecError("train config: betas must be in [0, 1)");
  if (pseudo_batch < 1) throw SpecError("train config: pseudo_batch must be >= 1");
  if (epochs < 0) throw SpecError("train config: negative epochs");
  if (init_std < 0) throw SpecError("train config: negative init std");
}

template <class T>
void adam_step(AdamState<T>& state, double lr, double beta1, double beta2, double eps,
               std::span<const std::span<T>> params, std::span<const std::span<const T>> grads) {
  if (params.size() != grads.size()) throw SpecError("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), T(0));
      state.v.emplace_back(p.size(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw SpecError("adam_step: state does not match parameters");
  ++state.step;
  const T b1 = T(beta1), b2 = T(beta2);
  const T bc1 = T(1 - std::pow(beta1, double(state.step)));
  const T bc2 = T(1 - std::pow(beta2, double(state.step)));
  const T step = T(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    auto g = grads[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (p.size() != g.size() || p.size() != m.size()) throw SpecError("adam_step: buffer size mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      p[j] -= step * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + T(eps));
    }
  }
}

template void adam_step<float>(AdamState<float>&, double, double, double, double, std::span<const std::span<float>>,
                               std::span<const std::span<const float>>);
template void adam_step<double>(AdamState<double>&, double, double, double, double,
                                std::span<const std::span<double>>, std::span<const std::span<const double>>);

GradCheckReport finite_difference_check(std::string operation,
                                        const std::function<double(std::span<const double>)>& f,
                                        std::vector<double> x, std::span<const double> analytic, double h) {
  if (analytic.size() != x.size()) throw SpecError("finite_difference_check: gradient size differs from x");
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    const double numeric = (up - down) / (2 * h);
    diff += (numeric - analytic[i]) * (numeric - analytic[i]);
    na += analytic[i] * analytic[i];
    nn += numeric * numeric;
  }
  return {std::move(operation), std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12})};
}

// ---------------------------------------------------------------------------

namespace {

TokenId single_token(const PromptInstance& p) {
  if (p.gold_tokens.size() != 1) {
    throw SpecError("filter training supports single-token labels only; '" + p.gold_label + "' has " +
                    std::to_string(p.gold_tokens.size()) + " tokens");
  }
  return p.gold_tokens.front();
}

TVSFilter to_filter(const grad::FilterParams<float>& p, int layer,
                    const std::map<std::string, std::vector<TokenId>>& label_map) {
  TVSFilter f = TVSFilter::zero(int(p.w_enc.rows()), int(p.w_enc.cols()), layer);
  f.w_enc.mat() = p.w_enc;
  f.b_enc.mat() = p.b_enc;
  f.w_dec.mat() = p.w_dec;
  f.label_map = label_map;
  return f;
}

std::span<float> flat(grad::Mat<float>& m) { return {m.data(), std::size_t(m.size())}; }
std::span<float> flat(RowVector<float>& m) { return {m.data(), std::size_t(m.size())}; }

FilterTrainResult run_filter_training(const ModelBundle& model, grad::FilterParams<float> params, int layer,
                                      FreezePart freeze, std::span<const PromptInstance> train,
                                      std::span<const PromptInstance> val, const TrainConfig& cfg) {
  cfg.validate();
  model.config.validate();
  if (layer < 0 || layer >= model.config.n_layers) throw SpecError("train_filter: layer out of range");
  if (train.empty()) throw SpecError("train_filter: empty training set");
  const auto checksum = model.checksum();

  std::map<std::string, std::vector<TokenId>> label_map;
  std::vector<TokenId> targets;
  for (const auto& p : train) {
    targets.push_back(single_token(p));
    label_map[p.gold_label] = p.gold_tokens;
  }
  for (const auto& p : val) single_token(p);

  // The model is frozen and context blocking cuts the last token off, so the
  // block-`layer` residuals are fixed inputs to the per-token path.
  const auto rows = last_residuals(model, train, layer);
  const auto d = Eigen::Index(model.config.d_model);
  grad::Mat<float> h_all(Eigen::Index(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    h_all.row(Eigen::Index(i)) = Eigen::Map<const RowVector<float>>(rows[i].data(), d);
  }

  FilterTrainResult result;
  AdamState<float> adam;
  auto rng = substream(cfg.seed, "filter.order", std::uint64_t(layer));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (!cfg.reshuffle) std::shuffle(order.begin(), order.end(), rng);
  const auto bs = std::size_t(cfg.pseudo_batch);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.reshuffle) std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const auto n = std::min(bs, order.size() - start);
      grad::Mat<float> h(Eigen::Index(n), d);
      std::vector<TokenId> y(n);
      for (std::size_t i = 0; i < n; ++i) {
        h.row(Eigen::Index(i)) = h_all.row(Eigen::Index(order[start + i]));
        y[i] = targets[order[start + i]];
      }
      auto g = grad::zeros_like(params);
      epoch_loss += double(grad::filter_loss_and_grad<float>(model.config, model.weights, layer, params, h, y, &g));
      const float scale = 1.0f / float(cfg.pseudo_batch);
      g.w_enc *= scale;
      g.b_enc *= scale;
      g.w_dec *= scale;

      std::vector<std::span<float>> ps;
      std::vector<std::span<const float>> gs;
      if (freeze != FreezePart::kEnc) {
        ps.push_back(flat(params.w_enc));
        ps.push_back(flat(params.b_enc));
        gs.push_back(flat(g.w_enc));
        gs.push_back(flat(g.b_enc));
      }
      if (freeze != FreezePart::kDec) {
        ps.push_back(flat(params.w_dec));
        gs.push_back(flat(g.w_dec));
      }
      adam_step<float>(adam, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, ps, gs);
    }
    result.epoch_losses.push_back(epoch_loss / double(order.size()));
  }

  result.filter = to_filter(params, layer, label_map);
  if (!val.empty()) {
    InterventionSpec iv;
    iv.injection = FilterInjection{result.filter, layer, -1};
    result.val_accuracy = eval_accuracy(model, val, iv);
    result.val_cross_entropy = eval_cross_entropy(model, val, iv);
  }
  if (model.checksum() != checksum) throw Error("filter training modified the frozen model");
  return result;
}

}  // namespace

FilterGrad grad_filter(const ModelBundle& model, const TVSFilter& filter, const PromptInstance& prompt) {
  const TokenId target = single_token(prompt);
  const int layer = filter.layer;
  if (layer < 0 || layer >= model.config.n_layers) throw SpecError("grad_filter: filter layer out of range");
  if (filter.d() != model.config.d_model) throw ShapeMismatch("grad_filter: filter width differs from d_model");
  const auto w = model.weights.cast<double>();
  const auto res = forward<double>(model.config, w, prompt.tokens, TraceSpec::last_residual(layer), {},
                                   LogitPositions::kLast);
  const grad::Mat<double> h = res.trace.at(layer, TraceKind::kResidual).mat();
  const auto params = grad::filter_params<double>(filter);
  auto g = grad::zeros_like(params);
  const TokenId y[] = {target};
  FilterGrad out;
  out.loss = grad::filter_loss_and_grad<double>(model.config, w, layer, params, h, y, &g);
  out.d_w_enc = TensorD::from_matrix(g.w_enc);
  out.d_b_enc = TensorD(Shape{std::size_t(g.b_enc.size())}, std::vector<double>(g.b_enc.data(), g.b_enc.data() + g.b_enc.size()));
  out.d_w_dec = TensorD::from_matrix(g.w_dec);
  return out;
}

FilterTrainResult train_filter(const ModelBundle& model, int layer, int rank, std::span<const PromptInstance> train,
                               std::span<const PromptInstance> val, const TrainConfig& cfg) {
  const int d = model.config.d_model;
  if (rank < 1 || rank > d) throw SpecError("train_filter: rank must be in [1, d_model]");
  auto rng = substream(cfg.seed, "filter.init", std::uint64_t(layer) * 4096 + std::uint64_t(rank));
  const double std = cfg.init_std > 0 ? cfg.init_std : 1.0 / std::sqrt(double(d));
  const auto init = TVSFilter::random(d, rank, layer, rng, std);
  return run_filter_training(model, grad::filter_params<float>(init), layer, FreezePart::kNone, train, val, cfg);
}

std::string to_string(FreezePart f) {
  switch (f) {
    case FreezePart::kNone: return "none";
    case FreezePart::kEnc: return "enc";
    case FreezePart::kDec: return "dec";
  }
  return "?";
}

FilterTrainResult finetune_filter_part(const ModelBundle& model, const TVSFilter& filter, FreezePart freeze,
                                       std::span<const PromptInstance> train, std::span<const PromptInstance> val,
                                       const TrainConfig& cfg) {
  if (filter.d() != model.config.d_model) throw ShapeMismatch("finetune: filter width differs from d_model");
  return run_filter_training(model, grad::filter_params<float>(filter), filter.layer, freeze, train, val, cfg);
}

// ---------------------------------------------------------------------------

TrainSequence to_train_sequence(const PromptInstance& p) {
  if (p.gold_tokens.empty()) throw SpecError("to_train_sequence: prompt without gold tokens");
  TrainSequence s;
  s.tokens = p.tokens;
  s.tokens.insert(s.tokens.end(), p.gold_tokens.begin(), p.gold_tokens.end() - 1);
  for (const auto& label : p.label_token_positions) {
    for (int pos : label) s.targets.push_back({pos - 1, p.tokens[std::size_t(pos)]});
  }
  for (std::size_t i = 0; i < p.gold_tokens.size(); ++i) {
    s.targets.push_back({p.last_index + int(i), p.gold_tokens[i]});
  }
  return s;
}

ModelBundle pretrain_toy(ModelConfig cfg, const SyntheticWorld& world, const PretrainConfig& pc) {
  if (pc.steps < 0 || pc.batch < 1) throw SpecError("pretrain: steps must be >= 0 and batch >= 1");
  const auto tokenizer = world.tokenizer();
  cfg.vocab_size = tokenizer.size();
  cfg.validate();

  ModelBundle bundle;
  bundle.config = cfg;
  bundle.vocab = tokenizer.vocab();
  bundle.task_json = spec_to_json(world.spec);
  {
    auto rng = substream(pc.seed, "pretrain.init");
    bundle.weights = init_weights(cfg, rng);
  }

  PretrainSampler sampler(world, tokenizer, pc.corpus);
  auto corpus_rng = substream(pc.seed, "pretrain.corpus");
  AdamState<float> adam;
  const auto batch = std::size_t(pc.batch);
  std::vector<ModelWeights<float>> per_seq(batch, ModelWeights<float>::zeros_like(cfg));
  auto total = ModelWeights<float>::zeros_like(cfg);

  std::vector<std::span<float>> params;
  std::vector<std::span<float>> gsum;
  bundle.weights.for_each([&](const std::string&, TensorF& t) { params.push_back(t.span()); });
  total.for_each([&](const std::string&, TensorF& t) { gsum.push_back(t.span()); });
  const std::vector<std::span<const float>> grads(gsum.begin(), gsum.end());

  double log_loss = 0;
  int log_count = 0;
  for (int step = 0; step < pc.steps; ++step) {
    std::vector<TrainSequence> seqs;
    for (std::size_t b = 0; b < batch; ++b) seqs.push_back(to_train_sequence(sampler.next(corpus_rng)));
    std::vector<double> losses(batch);
    parallel_for(batch, [&](std::size_t b) {
      per_seq[b].for_each([](const std::string&, TensorF& t) { std::fill(t.span().begin(), t.span().end(), 0.0f); });
      losses[b] = double(grad::model_loss_and_grad<float>(cfg, bundle.weights, seqs[b].tokens, seqs[b].targets,
                                                          &per_seq[b]));
    });

    // Fixed-order reduction keeps the update independent of scheduling.
    total.for_each([](const std::string&, TensorF& t) { std::fill(t.span().begin(), t.span().end(), 0.0f); });
    for (std::size_t b = 0; b < batch; ++b) {
      std::size_t i = 0;
      per_seq[b].for_each([&](const std::string&, const TensorF& t) {
        auto dst = gsum[i];
        for (std::size_t j = 0; j < t.size(); ++j) dst[j] += t[j];
        ++i;
      });
    }
    double sq = 0;
    for (auto g : grads) {
      for (float v : g) sq += double(v) * double(v);
    }
    const double norm = std::sqrt(sq) / double(batch);
    float scale = 1.0f / float(batch);
    if (pc.clip_norm > 0 && norm > pc.clip_norm) scale *= float(pc.clip_norm / norm);
    for (auto g : gsum) {
      for (auto& v : g) v *= scale;
    }

    const double loss = std::accumulate(losses.begin(), losses.end(), 0.0) / double(batch);
    if (!std::isfinite(loss) || !std::isfinite(norm)) {
      throw NumericalFailure("pretraining diverged at step " + std::to_string(step));
    }
    adam_step<float>(adam, pc.learning_rate, pc.beta1, pc.beta2, pc.adam_eps, params, grads);

    log_loss += loss;
    ++log_count;
    if (pc.on_log && pc.log_every > 0 && (step + 1) % pc.log_every == 0) {
      pc.on_log(step + 1, log_loss / log_count);
      log_loss = 0;
      log_count = 0;
    }
  }
  return bundle;
}

}  // namespace icl
