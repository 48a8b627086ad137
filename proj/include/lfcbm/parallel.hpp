#pragma once

#include <cstddef>
#include <functional>

namespace lfcbm {

// Worker cap from LFCBM_THREADS, else hardware concurrency (at least 1).
std::size_t thread_budget();

// Runs fn(i) for i in [0, n). Each index is independent, so results do not
// depend on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace lfcbm
