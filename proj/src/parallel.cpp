#include "l2p/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace l2p {

namespace {

int env_threads() {
  static const int cached = [] {
    if (const char* s = std::getenv("L2P_THREADS")) {
      const int n = std::atoi(s);
      if (n > 0) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return cached;
}

thread_local int g_override = 0;

}  // namespace

int max_threads() { return g_override > 0 ? g_override : env_threads(); }

void set_thread_override(int n) { g_override = n; }

void parallel_rows(int n, const std::function<void(int, int)>& fn) {
  const int workers = std::min(max_threads(), n);
  if (workers <= 1 || n <= 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  const int chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const int lo = w * chunk;
    const int hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace l2p
