#include "dropletscope/parallel.hpp"

#include <atomic>

namespace dropletscope {

namespace {
std::atomic<std::size_t> g_threads{1};
}

std::size_t worker_threads() noexcept { return g_threads.load(std::memory_order_relaxed); }

void set_worker_threads(std::size_t n) noexcept { g_threads.store(n == 0 ? 1 : n, std::memory_order_relaxed); }

}  // namespace dropletscope
