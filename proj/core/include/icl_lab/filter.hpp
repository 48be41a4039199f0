#pragma once

#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "icl_lab/tensor.hpp"

namespace icl {

/// Low-rank residual filter h' = (h·W_enc + b_enc)·W_dec, bound to the block
/// whose output it replaces.
struct TVSFilter {
  TensorF w_enc;  // d×r
  TensorF b_enc;  // r
  TensorF w_dec;  // r×d
  int layer = 0;
  /// Verbalization the filter was trained for: label string -> token ids.
  std::map<std::string, std::vector<TokenId>> label_map;

  int d() const { return static_cast<int>(w_enc.dim(0)); }
  int r() const { return static_cast<int>(w_enc.dim(1)); }
  void validate() const;

  /// W_enc·W_dec in 64-bit.
  TensorD map_matrix() const;

  static TVSFilter identity(int d, int layer);
  static TVSFilter zero(int d, int r, int layer);
  /// W_enc, W_dec ~ N(0, 1/d), b_enc = 0.
  static TVSFilter random(int d, int r, int layer, std::mt19937_64& rng, double stddev);
};

/// "TVS1" container: magic, u32 LE header length, JSON {d, r, layer,
/// label_map}, then W_enc, b_enc, W_dec as little-endian f32.
void save_filter(const TVSFilter& filter, const std::filesystem::path& path);
TVSFilter load_filter(const std::filesystem::path& path);

}  // namespace icl
