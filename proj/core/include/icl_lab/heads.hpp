#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "icl_lab/filter.hpp"
#include "icl_lab/model.hpp"
#include "icl_lab/tasks.hpp"

namespace icl {

/// Attention mass from the prompt's last token to every demonstration label
/// token, for one head. `attention` is the n_heads×T×T trace of a layer.
double induction_score(const TensorF& attention, const PromptInstance& prompt, int head);

struct HeadScanRow {
  HeadId head;
  double d_ecc = 0.0;
  double d_flux = 0.0;
  /// Relative change, or absolute change when the clean accuracy is 0.
  double d_acc = 0.0;
  double induction = 0.0;
  /// Set when the ablated cloud was degenerate; the deltas are then NaN.
  bool degenerate = false;
  std::string error;
};

struct HeadScanReport {
  int layer = 0;
  int n_layers = 0;  // of the model, for coverage
  double clean_ecc = 0.0;
  double clean_flux = 0.0;
  double clean_acc = 0.0;
  bool acc_absolute = false;
  std::vector<HeadScanRow> rows;
};

/// Ablates each head of `layer` in turn for the full forward and compares
/// the layer's last-token cloud and open-end accuracy with the clean run.
/// Flux uses `filter`, which must be trained at `layer`.
HeadScanReport head_scan(const ModelBundle& model, int layer, std::span<const PromptInstance> prompts,
                         const TVSFilter& filter);

/// Fraction of the model's layers covered by a set of scans.
double scan_coverage(std::span<const HeadScanReport> reports);

struct DHSelection {
  std::vector<HeadId> dh;
  std::vector<HeadId> anti_dh;
  double theta = 0.035;
  std::vector<int> layers;
  double coverage = 0.0;
};

DHSelection identify_dh(std::span<const HeadScanReport> reports, double theta = 0.035);
inline DHSelection identify_dh(const HeadScanReport& report, double theta = 0.035) {
  return identify_dh(std::span(&report, 1), theta);
}

/// Heads whose flux change is strictly below −theta, across layers.
std::vector<HeadId> select_ablation_set(std::span<const HeadScanReport> reports, double theta = 0.05);

/// Bottom ceil(K·n) heads by flux change (min 1), most negative first.
std::vector<HeadId> bottom_heads(std::span<const HeadScanReport> reports, double k_fraction);
int dh_overlap(std::span<const HeadScanReport> a, std::span<const HeadScanReport> b, double k_fraction = 0.01);

/// Each trial draws, per layer, as many heads as `heads` has there, from
/// that layer's heads outside `heads` (all of them if too few remain).
std::vector<std::vector<HeadId>> matched_random_heads(std::span<const HeadId> heads, int n_heads_per_layer,
                                                      std::mt19937_64& rng, int trials);

/// Open-end accuracy per named prompt set with every listed head zeroed.
std::vector<std::pair<std::string, double>> ablated_accuracy(
    const ModelBundle& model, std::span<const HeadId> heads,
    std::span<const std::pair<std::string, std::vector<PromptInstance>>> configs);

/// One JSON object per head: {layer, head, d_ecc, d_flux, d_acc, induction}.
void write_scan_jsonl(std::span<const HeadScanReport> reports, const std::filesystem::path& path);
std::vector<HeadScanReport> read_scan_jsonl(const std::filesystem::path& path);
std::string dh_selection_json(const DHSelection& sel);

}  // namespace icl
