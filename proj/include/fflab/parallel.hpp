#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace fflab {

// Thread count: explicit value if > 0, else FFCK_THREADS, else hardware concurrency.
int resolve_threads(int requested);

// Process-wide default used when a caller passes threads = 0.
void set_default_threads(int n);
int default_threads();

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks; results must
// be written to per-index slots so the outcome does not depend on scheduling.
// The first exception thrown by any worker is rethrown on the caller's thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, int threads = 0);

// Maps fn over [0, n) into a vector, preserving index order.
template <typename T, typename F>
std::vector<T> parallel_map(std::size_t n, F&& fn, int threads = 0) {
  std::vector<T> out(n);
  parallel_for(n, [&](std::size_t i) { out[i] = fn(i); }, threads);
  return out;
}

}  // namespace fflab
