#pragma once

#include <cstddef>
#include <functional>

namespace smn {

/// Worker count: SMN_THREADS if set (>= 1), else hardware concurrency.
int thread_budget();

/// Runs fn(i) for i in [0, n) on up to thread_budget() threads. Each index is
/// processed exactly once; callers write results into per-index slots and
/// reduce afterwards in index order, so results never depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace smn
