#pragma once

#include <cstddef>
#include <functional>

namespace csdm {

// Worker cap from CSDM_THREADS (>= 1), else the hardware concurrency.
std::size_t worker_count();

// Runs fn(i) for i in [0, n) on up to worker_count() threads with a static
// partition. Results must be written to per-index slots; the first exception
// by index is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace csdm
