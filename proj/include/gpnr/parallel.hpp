#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace gpnr {

// Worker count: explicit flag > 0 wins, then GPNR_THREADS, then the hardware.
inline int resolve_threads(int flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("GPNR_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

// Runs body(begin, end) over fixed contiguous blocks. The block layout depends
// only on n and threads, never on scheduling, so callers that write disjoint
// outputs get identical results on every run.
inline void parallel_for(int64_t n, int threads,
                         const std::function<void(int64_t, int64_t)>& body) {
  if (n <= 0) return;
  threads = std::max(1, std::min<int64_t>(threads, n));
  if (threads == 1) {
    body(0, n);
    return;
  }
  const int64_t block = (n + threads - 1) / threads;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    const int64_t begin = t * block;
    const int64_t end = std::min<int64_t>(n, begin + block);
    if (begin >= end) break;
    pool.emplace_back([&body, begin, end] { body(begin, end); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace gpnr
