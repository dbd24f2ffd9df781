#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace eiglab {

namespace detail {
inline std::atomic<std::size_t>& thread_cap() {
  static std::atomic<std::size_t> cap{0};
  return cap;
}

inline bool& in_parallel_region() {
  thread_local bool inside = false;
  return inside;
}
}  // namespace detail

/// Worker cap; 0 means "hardware concurrency". Falls back to EIGLAB_THREADS.
inline void set_max_threads(std::size_t n) { detail::thread_cap() = n; }

inline std::size_t max_threads() {
  std::size_t n = detail::thread_cap();
  if (n == 0) {
    if (const char* env = std::getenv("EIGLAB_THREADS")) {
      try {
        n = static_cast<std::size_t>(std::stoul(env));
      } catch (...) {
        n = 0;
      }
    }
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

/// Runs fn(i) for i in [0, n). Each index must write only its own output slot;
/// results therefore do not depend on the number of workers.
template <class F>
void parallel_for(std::size_t n, F&& fn) {
  const std::size_t workers = detail::in_parallel_region() ? 1 : std::min(max_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto body = [&] {
    detail::in_parallel_region() = true;
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) break;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        next = n;
        break;
      }
    }
    detail::in_parallel_region() = false;
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 0; w + 1 < workers; ++w) pool.emplace_back(body);
  body();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace eiglab
