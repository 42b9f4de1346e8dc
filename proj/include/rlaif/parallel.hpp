#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace rlaif {

// RLAIF_THREADS overrides the hardware thread count. Results do not depend on it.
inline std::size_t worker_count(std::size_t items) {
  std::size_t hw = std::max<unsigned>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("RLAIF_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) hw = static_cast<std::size_t>(n);
  }
  return std::max<std::size_t>(1, std::min(hw, items));
}

// Calls body(i) for every i in [0, n). Work is handed out dynamically, so body must only write
// to slot i of its outputs. The first exception thrown is rethrown after all workers stop.
template <class Body>
void parallel_for(std::size_t n, Body&& body) {
  const std::size_t workers = worker_count(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&] {
    for (std::size_t i; !failed.load() && (i = next.fetch_add(1)) < n;) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run);
    run();
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace rlaif
