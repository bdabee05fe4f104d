#include "multiquant/parallel.hpp"

#include <algorithm>
#include <thread>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mq {

namespace {
int g_workers = 0;
}

int worker_count() {
  if (g_workers > 0) return g_workers;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

void set_worker_count(int n) { g_workers = std::max(0, n); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
  if (n <= 0) return;
  const int workers = std::min<int64_t>(worker_count(), n);
  if (workers <= 1) {
    body(0, n);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel num_threads(workers)
  {
    const int tid = omp_get_thread_num();
    const int total = omp_get_num_threads();
    const int64_t chunk = (n + total - 1) / total;
    const int64_t begin = tid * chunk;
    const int64_t end = std::min<int64_t>(n, begin + chunk);
    if (begin < end) body(begin, end);
  }
#else
  std::vector<std::thread> pool;
  const int64_t chunk = (n + workers - 1) / workers;
  for (int t = 0; t < workers; ++t) {
    const int64_t begin = t * chunk;
    const int64_t end = std::min<int64_t>(n, begin + chunk);
    if (begin < end) pool.emplace_back([&body, begin, end] { body(begin, end); });
  }
  for (auto& th : pool) th.join();
#endif
}

}  // namespace mq
