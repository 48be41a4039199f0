#pragma once

#include <filesystem>

#include "icl_lab/model.hpp"

namespace icl {

/// "TWB1" weight container: 4-byte magic, u32 LE header length, UTF-8 JSON
/// header {config, tensors: name -> {dtype, shape, offset, length}, vocab,
/// task}, then the raw little-endian f32 payload. Offsets are relative to
/// the first payload byte.
void save_model(const ModelBundle& model, const std::filesystem::path& path);
ModelBundle load_model(const std::filesystem::path& path);

std::vector<char> serialize_model(const ModelBundle& model);
ModelBundle deserialize_model(const std::vector<char>& bytes);

}  // namespace icl
