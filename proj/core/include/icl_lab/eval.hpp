#pragma once

#include <span>
#include <vector>

#include "icl_lab/model.hpp"
#include "icl_lab/tasks.hpp"

namespace icl {

/// Open-end hard match: greedy decoding of exactly len(gold) steps over the
/// full vocabulary must reproduce the gold token sequence.
std::vector<char> eval_correct(const ModelBundle& model, std::span<const PromptInstance> prompts,
                               const InterventionSpec& intervention = {});
double eval_accuracy(const ModelBundle& model, std::span<const PromptInstance> prompts,
                     const InterventionSpec& intervention = {});

/// Mean over prompts of the teacher-forced per-token cross-entropy of the
/// gold label. A filter injection stays on the prompt's final position.
double eval_cross_entropy(const ModelBundle& model, std::span<const PromptInstance> prompts,
                          const InterventionSpec& intervention = {});

/// Last-position residual after block `layer` for every prompt (clean run,
/// or with intervention), as float rows.
std::vector<std::vector<float>> last_residuals(const ModelBundle& model, std::span<const PromptInstance> prompts,
                                               int layer, const InterventionSpec& intervention = {});

}  // namespace icl
