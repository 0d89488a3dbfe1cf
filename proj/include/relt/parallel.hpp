#pragma once

#include <cstddef>
#include <functional>

namespace relt {

// Worker count: RELT_THREADS if set (>= 1), else hardware concurrency.
std::size_t thread_count();

// Runs fn(i) for i in [0, n) over contiguous static chunks. fn must only
// write to slot i of its outputs; results are then independent of the
// thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace relt
