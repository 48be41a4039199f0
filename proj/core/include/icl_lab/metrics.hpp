#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "icl_lab/cloud.hpp"
#include "icl_lab/filter.hpp"

namespace icl {

/// Fraction of total variance on the first principal component.
double eccentricity(const HiddenCloud& cloud);

struct FluxOptions {
  /// Layer sweeps evaluate clouds against filters trained elsewhere.
  bool allow_layer_mismatch = false;
};

/// ‖Cov[H·W_enc·W_dec]‖_* / ‖Cov[H]‖_*. The encoder bias shifts every point
/// equally and drops out of the covariance.
double covariance_flux(const HiddenCloud& cloud, const TVSFilter& filter, FluxOptions opts = {});

/// 1 − (top-r eigenvalue mass) / (total): variance no rank-r map can keep.
double remaining_cov_ratio(const HiddenCloud& cloud, int r);

/// For each left singular vector of W_enc, the norm kept after projecting
/// onto the span of the cloud's top-m principal components.
std::vector<double> enc_alignment(const TVSFilter& filter, const HiddenCloud& cloud, int m = 64);

/// Singular values of W_enc·W_dec above rel_tol·σ_max.
int effective_rank(const TVSFilter& filter, double rel_tol = 1e-3);

struct PcaProjection {
  std::vector<int> dims;      // 1-based component indices
  TensorD coords;             // N×|dims|
  std::vector<std::string> labels;
  std::vector<double> explained_variance;
};

PcaProjection pca_projection(const HiddenCloud& cloud, std::vector<int> dims = {1, 2, 3});

/// Columns point_id, gold_label, pc<i>...
void write_pca_csv(const PcaProjection& proj, const std::filesystem::path& path);

struct MetricRow {
  int layer = 0;
  int shots = 0;
  std::string mode;
  double eccentricity = 0.0;
  double covariance_flux = 0.0;
  double remaining_cov_ratio = 0.0;
};

}  // namespace icl
