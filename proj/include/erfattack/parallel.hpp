#pragma once

#include <cstddef>
#include <functional>

namespace erfattack {

/// Worker count: ERFATTACK_THREADS if set and positive, else the hardware
/// concurrency, never less than one.
std::size_t worker_count();

/// Calls job(i) for i in [0, n) on up to worker_count() threads. Jobs must
/// write only to their own slot; the first exception thrown is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& job);

}  // namespace erfattack
