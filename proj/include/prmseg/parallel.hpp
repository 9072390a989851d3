#pragma once

#include <cstdint>
#include <functional>

namespace prmseg {

// Global worker cap. 1 = fully serial. Results never depend on the thread
// count: parallel loops are statically partitioned over output elements and
// every element is written by exactly one thread with a fixed per-element
// operation order.
void set_threads(int n);
int threads();

namespace detail {
void parallel_run(int64_t n, const std::function<void(int64_t, int64_t)>& range_fn);
}

// f(i) for i in [0, n). Falls back to a serial loop for tiny n.
template <class F>
void parallel_for(int64_t n, F&& f) {
  if (n <= 0) return;
  if (threads() <= 1 || n < 2048) {
    for (int64_t i = 0; i < n; ++i) f(i);
    return;
  }
  detail::parallel_run(n, [&f](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) f(i);
  });
}

}  // namespace prmseg
