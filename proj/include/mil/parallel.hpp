#pragma once

#include <cstddef>
#include <functional>

namespace mil {

// Worker count: MIL_THREADS if set to a positive integer, else the hardware
// concurrency (at least 1).
std::size_t max_threads();

// Runs body(i) for i in [0, n) on up to max_threads() threads. Results must
// be written to per-index slots; the first exception (lowest index) is
// rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace mil
