#pragma once

#include <cstddef>
#include <functional>

namespace icl {

/// Worker count: ICL_LAB_THREADS if set (>= 1), else hardware concurrency.
int worker_count();

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Callers write
/// results into slot i, so output never depends on scheduling. The exception
/// from the lowest failing index is rethrown after all workers stop.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace icl
