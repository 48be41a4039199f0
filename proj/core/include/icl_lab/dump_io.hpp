#pragma once

#include <filesystem>

#include "icl_lab/cloud.hpp"

namespace icl {

/// "HSC1": magic, u32 N, d, layer, k, u32 mode-tag length, UTF-8 tag, then
/// N·d little-endian f32 row-major. Points are stored as f32, so a cloud
/// round-trips exactly when it came from f32 activations.
void write_dump(const HiddenCloud& cloud, const std::filesystem::path& path);
HiddenCloud read_dump(const std::filesystem::path& path);

}  // namespace icl
