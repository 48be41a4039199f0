#pragma once

#include <cstdint>
#include <vector>

#include "icl_lab/train.hpp"

namespace icl::test {

/// Finite-difference checks (64-bit, h = 1e-3) of every backward primitive,
/// the whole-model pretraining gradient, and the filter gradient. The filter
/// check differentiates the full hooked forward with injection, so it also
/// cross-checks the per-token shortcut against context blocking.
std::vector<GradCheckReport> run_gradient_suite(std::uint64_t seed);

}  // namespace icl::test
