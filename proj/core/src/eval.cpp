#include "icl_lab/eval.hpp"

#include <cmath>
#include <numeric>

#include "icl_lab/parallel.hpp"

namespace icl {

std::vector<char> eval_correct(const ModelBundle& model, std::span<const PromptInstance> prompts,
                               const InterventionSpec& intervention) {
  std::vector<char> ok(prompts.size(), 0);
  parallel_for(prompts.size(), [&](std::size_t i) {
    const auto& p = prompts[i];
    if (p.gold_tokens.empty()) throw SpecError("eval_accuracy: prompt without gold label tokens");
    const auto out = greedy_decode(model, p.tokens, static_cast<int>(p.gold_tokens.size()), intervention);
    ok[i] = out == p.gold_tokens;
  });
  return ok;
}

double eval_accuracy(const ModelBundle& model, std::span<const PromptInstance> prompts,
                     const InterventionSpec& intervention) {
  if (prompts.empty()) return 0.0;
  const auto ok = eval_correct(model, prompts, intervention);
  return double(std::accumulate(ok.begin(), ok.end(), 0)) / double(ok.size());
}

double eval_cross_entropy(const ModelBundle& model, std::span<const PromptInstance> prompts,
                          const InterventionSpec& intervention) {
  if (prompts.empty()) return 0.0;
  std::vector<double> ce(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    const auto& p = prompts[i];
    if (p.gold_tokens.empty()) throw SpecError("eval_cross_entropy: prompt without gold label tokens");
    std::vector<TokenId> seq = p.tokens;
    seq.insert(seq.end(), p.gold_tokens.begin(), p.gold_tokens.end() - 1);
    InterventionSpec iv = intervention;
    if (iv.injection && iv.injection->position < 0) iv.injection->position = p.last_index;
    const auto res = forward(model, seq, {}, iv, LogitPositions::kAll);
    double total = 0;
    for (std::size_t t = 0; t < p.gold_tokens.size(); ++t) {
      const auto row = res.logits.row(std::size_t(p.last_index) + t);
      double mx = -INFINITY;
      for (float v : row) mx = std::max(mx, double(v));
      double sum = 0;
      for (float v : row) sum += std::exp(double(v) - mx);
      total += std::log(sum) + mx - double(row[std::size_t(p.gold_tokens[t])]);
    }
    ce[i] = total / double(p.gold_tokens.size());
  });
  return std::accumulate(ce.begin(), ce.end(), 0.0) / double(ce.size());
}

std::vector<std::vector<float>> last_residuals(const ModelBundle& model, std::span<const PromptInstance> prompts,
                                               int layer, const InterventionSpec& intervention) {
  std::vector<std::vector<float>> rows(prompts.size());
  const auto spec = TraceSpec::last_residual(layer);
  parallel_for(prompts.size(), [&](std::size_t i) {
    const auto res = forward(model, prompts[i].tokens, spec, intervention, LogitPositions::kLast);
    const auto& h = res.trace.at(layer, TraceKind::kResidual);
    rows[i].assign(h.span().begin(), h.span().end());
  });
  return rows;
}

}  // namespace icl
