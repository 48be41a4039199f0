#pragma once

#include <cstdint>
#include <filesystem>

#include "icl_lab/train.hpp"

namespace icl::test {

enum class ToyWorld { kAmbiguous, kFacts };

/// Pretraining recipe of the acceptance models (d=128, 4 layers, 4 heads).
PretrainConfig toy_pretrain_config(ToyWorld world, std::uint64_t seed);

struct ToyModel {
  std::filesystem::path path;
  /// Seconds spent pretraining in this call; 0 when served from the cache.
  double trained_seconds = 0;
};

/// Pretrained toy model for (world, seed), cached on disk under
/// $ICL_LAB_CACHE_DIR (default: the build tree's model_cache). The file name
/// carries a hash of the recipe, so changing it never serves a stale model.
ToyModel toy_model(ToyWorld world, std::uint64_t seed);

std::filesystem::path cache_dir();

}  // namespace icl::test
