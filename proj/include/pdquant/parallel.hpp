#pragma once

#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace pdq {

/// Runs fn(i) for i in [0, n) across up to max_threads workers. Work items
/// must be independent; each index is processed exactly once, so results
/// written to per-index slots are deterministic regardless of scheduling.
inline void parallel_for_indexed(int64_t n, const std::function<void(int64_t)>& fn,
                                 int max_threads = 0) {
  if (n <= 0) return;
  unsigned hw = std::thread::hardware_concurrency();
  int64_t workers = static_cast<int64_t>(max_threads > 0 ? max_threads : (hw ? hw : 1));
  if (workers > n) workers = n;
  if (workers <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
  for (int64_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (int64_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[static_cast<size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace pdq
