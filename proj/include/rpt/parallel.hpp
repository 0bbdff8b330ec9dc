#pragma once

#include <cstddef>
#include <functional>

namespace rpt {

/// Worker count from RPT_THREADS (default 1, clamped to [1, 256]).
int thread_count();

/// Calls fn(i) for i in [0, n) on up to thread_count() threads. Work is split into
/// contiguous chunks so results written by index are independent of the thread count.
/// The first exception thrown by any call is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace rpt
