#ifndef CFLTR_PARALLEL_H_
#define CFLTR_PARALLEL_H_

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace cfltr {

// Runs fn(i) for i in [0, n) on up to `threads` workers (0 = hardware
// concurrency). Work items must be independent; results should be written to
// per-index slots so that output order does not depend on scheduling. The
// first exception thrown by any item is rethrown after all workers join.
template <typename Fn>
void ParallelFor(std::size_t n, int threads, Fn&& fn) {
  std::size_t workers =
      threads > 0 ? static_cast<std::size_t>(threads)
                  : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace cfltr

#endif  // CFLTR_PARALLEL_H_
