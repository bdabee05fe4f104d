#pragma once

#include <cstdint>
#include <functional>

namespace mq {

// Worker count for loop parallelism (bounded by MQ_THREADS). BLAS itself is
// pinned to one thread; all parallelism lives at this level.
int worker_count();
void set_worker_count(int n);

// Static split of [0, n) into worker ranges. Chunk boundaries depend only
// on n and a fixed chunk count, so reductions that combine per-chunk
// partials in index order are bitwise reproducible for any worker count.
inline constexpr int kReduceChunks = 16;

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body);

}  // namespace mq
