#pragma once

// Deterministic parallel map. Work item i always writes slot i, and callers
// reduce in index order, so results are identical for any worker count.
// DRIFT_EVADE_THREADS caps the pool.

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace drift {

inline int worker_count() {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  if (const char* env = std::getenv("DRIFT_EVADE_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) hw = std::min(hw, static_cast<unsigned>(cap));
  }
  return static_cast<int>(hw);
}

template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const int workers = std::min<std::size_t>(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      for (std::size_t i = static_cast<std::size_t>(w); i < n;
           i += static_cast<std::size_t>(workers)) {
        fn(i);
      }
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace drift
