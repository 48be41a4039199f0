#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "icl_lab/tasks.hpp"
#include "icl_lab/train.hpp"

namespace icl {

enum class ExperimentKind {
  kFilterSweep,     // accuracy of rank-r filters over layers and ranks
  kMetricsVsK,      // eccentricity / flux against demonstration count
  kMetricsVsLayer,  // the same clouds read along the layer axis
  kHeadScan,        // per-head ablation scan
  kDhAblation,      // accuracy with the selected DH set vs matched controls
  kVerbalization,   // filter transfer to new label tokens
  kFactRecall,      // filter cross-entropy on fact tasks
  kPcaExport,       // PCA coordinates of clouds
};

std::string to_string(ExperimentKind k);
ExperimentKind parse_experiment_kind(std::string_view s);

struct ExperimentSpec {
  ExperimentKind kind = ExperimentKind::kFilterSweep;
  std::filesystem::path model;
  /// Task name in the model's synthetic world.
  std::string task;
  /// Unset means every layer; an explicitly empty grid is an error.
  std::optional<std::vector<int>> layers;
  std::optional<std::vector<int>> ranks;
  std::optional<std::vector<int>> shots;
  std::optional<std::vector<DemoMode>> modes;
  std::uint64_t seed = 0;
  /// Output directory: results.jsonl, summary.json and side files.
  std::filesystem::path out;

  int n_train = 2048;
  int n_val = 512;
  /// Cloud size is n_queries · demos_per_query.
  int n_queries = 256;
  int demos_per_query = 2;
  /// Rank of the layer-matched filters used for covariance flux.
  int flux_rank = 8;
  /// metrics_vs_layer: read every layer's cloud through this layer's filter.
  int flux_filter_layer = -1;
  TrainConfig train;
  /// head_scan / dh_ablation: demonstration mode of the scanned prompts.
  DemoMode scan_mode = DemoMode::kGold;
  double dh_theta = 0.05;
  int control_trials = 10;
  /// verbalization: task whose labels become the new verbalization (by
  /// index); defaults to the first other task with as many labels.
  std::string new_labels_task;
  /// Directory for trained filters shared between runs; empty disables.
  std::filesystem::path filter_cache;

  /// Grids with kind-specific defaults filled in.
  std::vector<int> resolved_ranks() const;
  std::vector<int> resolved_shots() const;
  std::vector<DemoMode> resolved_modes() const;

  /// Checks everything that does not need the model.
  void validate() const;
};

/// Canonical JSON of the fields that determine results (not output paths).
std::string experiment_fingerprint(const ExperimentSpec& spec);

/// Grid coordinates of one result; unset fields are -1 / empty.
struct GridKey {
  std::string task;
  int layer = -1;
  int rank = -1;
  int k = -1;
  std::string mode;
  int head = -1;
  std::string config;
  int trial = -1;

  friend auto operator<=>(const GridKey&, const GridKey&) = default;
  std::string describe() const;
};

struct ResultRow {
  ExperimentKind kind = ExperimentKind::kFilterSweep;
  GridKey key;
  std::string metric;
  double value = 0.0;
  std::uint64_t seed = 0;
};

std::string to_json_line(const ResultRow& row);
ResultRow parse_result_row(std::string_view line);
std::vector<ResultRow> read_results(const std::filesystem::path& path);

struct RunOutput {
  std::filesystem::path results;
  std::filesystem::path summary;
  std::size_t rows = 0;
  std::size_t units = 0;
  /// Units recovered from an interrupted run instead of recomputed.
  std::size_t resumed_units = 0;
};

/// Runs the grid and writes results.jsonl (rows sorted by grid key, no
/// timings) and summary.json. Completed units are journaled to
/// results.jsonl.partial, so an interrupted run resumes without
/// duplicating rows.
RunOutput run(const ExperimentSpec& spec);

/// Tidy per-panel CSVs for a figure kind from a results file. Returns the
/// written paths.
std::vector<std::filesystem::path> emit_plot_data(const std::filesystem::path& report, std::string_view figure,
                                                  const std::filesystem::path& out_dir);

}  // namespace icl
