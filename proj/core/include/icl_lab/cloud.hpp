#pragma once

#include <string>
#include <vector>

#include "icl_lab/tensor.hpp"

namespace icl {

/// N×d last-token hidden states H^{l,k}, kept in 64-bit for metrics.
struct HiddenCloud {
  TensorD points;
  int layer = 0;
  int shots = 0;
  std::string mode;
  /// Optional per-point gold labels (for PCA export).
  std::vector<std::string> labels;

  std::size_t n() const { return points.dim(0); }
  std::size_t d() const { return points.dim(1); }
  /// N >= 2, 2-D, finite.
  void validate() const;

  /// Up-casts float rows.
  static HiddenCloud from_rows(const std::vector<std::vector<float>>& rows, int layer, int shots, std::string mode);
};

}  // namespace icl
