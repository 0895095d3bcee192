#pragma once

#include <atomic>
#include <exception>
#include <thread>
#include <vector>

#include "dcsod/common.hpp"

namespace dcsod {

inline int default_worker_count() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : int(n);
}

// Runs fn(0) .. fn(n-1) on up to `workers` threads. Each task writes only to
// its own result slot, so the outcome is identical for any worker count; the
// lowest-index exception wins and is rethrown after all threads join.
template <class F>
void parallel_for_ordered(int n, int workers, F&& fn) {
  if (n <= 0) return;
  if (workers < 1) throw config_error("worker count must be >= 1");
  if (workers == 1 || n == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  const int threads = std::min(workers, n);
  std::vector<std::exception_ptr> errors(static_cast<size_t>(n));
  std::atomic<int> next{0};
  auto body = [&]() {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        errors[size_t(i)] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(size_t(threads));
  for (int t = 0; t < threads; ++t) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace dcsod
