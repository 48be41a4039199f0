#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "icl_lab/backward.hpp"
#include "icl_lab/model.hpp"
#include "icl_lab/tasks.hpp"

namespace icl {

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int pseudo_batch = 32;
  int epochs = 4;
  std::uint64_t seed = 0;
  /// Std of the W_enc/W_dec init; 0 means 1/sqrt(d). At toy width the
  /// 1/sqrt(d) init dwarfs what 4 epochs at lr 1e-4 can move, so the
  /// default matches the model's own init scale.
  double init_std = 0.02;
  /// Reshuffle the training order every epoch (else one shuffle up front).
  bool reshuffle = true;

  void validate() const;
};

/// First/second moments per parameter tensor, flattened.
template <class T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update over parallel lists of parameter and
/// gradient buffers. With lr = 0 parameters are left bit-identical.
template <class T>
void adam_step(AdamState<T>& state, double lr, double beta1, double beta2, double eps,
               std::span<const std::span<T>> params, std::span<const std::span<const T>> grads);

struct GradCheckReport {
  std::string operation;
  double max_rel_error = 0.0;
};

/// Compares an analytic gradient of f at x with central differences of step
/// h. The error is ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-12).
GradCheckReport finite_difference_check(std::string operation,
                                        const std::function<double(std::span<const double>)>& f,
                                        std::vector<double> x, std::span<const double> analytic, double h = 1e-3);

// ---------------------------------------------------------------------------
// Filter training on a frozen model.

struct FilterGrad {
  double loss = 0.0;
  TensorD d_w_enc, d_b_enc, d_w_dec;
};

/// Cross-entropy of the (single-token) gold label after the prompt with
/// `filter` injected at its layer, and its gradient w.r.t. the three filter
/// tensors. Computed in 64-bit.
FilterGrad grad_filter(const ModelBundle& model, const TVSFilter& filter, const PromptInstance& prompt);

struct FilterTrainResult {
  TVSFilter filter;
  double val_accuracy = 0.0;
  double val_cross_entropy = 0.0;
  /// Mean training loss of every epoch, in order.
  std::vector<double> epoch_losses;
};

/// Appendix-style protocol: Adam, gradients summed over pseudo_batch
/// examples and divided by pseudo_batch before each update, `epochs`
/// passes. Train prompts are zero-shot prompts carrying gold tokens. Every
/// label must be a single token; multi-token labels raise SpecError.
FilterTrainResult train_filter(const ModelBundle& model, int layer, int rank, std::span<const PromptInstance> train,
                               std::span<const PromptInstance> val, const TrainConfig& cfg);

/// Which filter tensors stay fixed. kEnc freezes W_enc and b_enc (decoder-
/// only fine-tune); kDec freezes W_dec (encoder-only fine-tune).
enum class FreezePart { kNone, kEnc, kDec };

std::string to_string(FreezePart f);

/// Fine-tunes a trained filter on prompts whose gold tokens carry the new
/// verbalization; returns the tuned filter and its val accuracy.
FilterTrainResult finetune_filter_part(const ModelBundle& model, const TVSFilter& filter, FreezePart freeze,
                                       std::span<const PromptInstance> train, std::span<const PromptInstance> val,
                                       const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Toy pretraining.

struct TrainSequence {
  std::vector<TokenId> tokens;
  std::vector<grad::LossTarget> targets;
};

/// Prompt plus its gold label, with a loss target at every demonstration
/// label token and every gold token.
TrainSequence to_train_sequence(const PromptInstance& prompt);

struct PretrainConfig {
  int steps = 4000;
  int batch = 16;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  CorpusConfig corpus;
  /// Called every log_every steps with (step, mean loss since last call).
  std::function<void(int, double)> on_log;
  int log_every = 100;
};

/// Trains a fresh model on the world's pretraining mixture. Deterministic
/// for a fixed seed regardless of worker count.
ModelBundle pretrain_toy(ModelConfig cfg, const SyntheticWorld& world, const PretrainConfig& pc);

}  // namespace icl
