#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace icl {

std::uint64_t fnv1a(std::string_view text);
std::uint64_t splitmix64(std::uint64_t& state);

/// Engine for one named purpose ("demos", "init", "controls", ...) under a
/// run seed. Streams with different names or indices are independent, so an
/// experiment step can be re-run alone and draw the same numbers.
std::mt19937_64 substream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0);

}  // namespace icl
