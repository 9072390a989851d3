#pragma once

#include <chrono>
#include <cstdio>
#include <ostream>
#include <vector>

#include "prmseg/kernels.hpp"
#include "prmseg/rng.hpp"

namespace prmseg {

// Correlation + weighting + both aggregations, direct vs im2col, over a
// grid of problem sizes. Agreement is checked before any timing so a wrong
// kernel is never benchmarked; returns false on the first disagreement.
template <typename T>
bool run_bench(const std::vector<int>& sizes, const std::vector<int64_t>& channels,
               const std::vector<int>& ns, std::ostream& out, double tol = 1e-5) {
  using clock = std::chrono::steady_clock;
  const auto fill = [](Tensor<T>& t, Rng& rng) {
    for (T& v : t.data) v = T(rng.uniform(-1.0, 1.0));
  };
  const auto max_diff = [](const Tensor<T>& a, const Tensor<T>& b) {
    double m = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
      const double d = std::abs(double(a.data[i]) - double(b.data[i]));
      const double scale = std::max({1.0, std::abs(double(a.data[i])), std::abs(double(b.data[i]))});
      m = std::max(m, d / scale);
    }
    return m;
  };

  out << "size,channels,s,agreement,direct_ms,im2col_ms,direct_voxps,im2col_voxps,speedup,"
         "checksum\n";
  bool all_ok = true;
  for (int size : sizes)
    for (int64_t M : channels)
      for (int s : ns) {
        Rng rng(derive_seed(0xBE7C, uint64_t(size) * 1000 + uint64_t(M), uint64_t(s)));
        Tensor<T> xt({size, size, size, M}), xa({size, size, size, M}), xm({size, size, size, M});
        fill(xt, rng);
        fill(xa, rng);
        fill(xm, rng);

        const auto run_direct = [&] {
          Tensor<T> xo = kernels::correlation_direct(xt, xa, s);
          Tensor<T> xw = kernels::softmax_axis0_forward(xo);
          Tensor<T> xp = kernels::aggregate_direct(xw, xa);
          Tensor<T> xq = kernels::aggregate_direct(xw, xm);
          return std::array<Tensor<T>, 3>{std::move(xo), std::move(xp), std::move(xq)};
        };
        const auto run_im2col = [&] {
          Tensor<T> xo = kernels::correlation_im2col(xt, xa, s);
          Tensor<T> xw = kernels::softmax_axis0_forward(xo);
          Tensor<T> xp = kernels::aggregate_im2col(xw, xa);
          Tensor<T> xq = kernels::aggregate_im2col(xw, xm);
          return std::array<Tensor<T>, 3>{std::move(xo), std::move(xp), std::move(xq)};
        };

        const auto d = run_direct();
        const auto c = run_im2col();
        double diff = 0;
        for (int i = 0; i < 3; ++i) diff = std::max(diff, max_diff(d[size_t(i)], c[size_t(i)]));
        const bool ok = diff <= tol;
        all_ok = all_ok && ok;

        double direct_ms = 0, im2col_ms = 0;
        if (ok) {
          const auto t0 = clock::now();
          (void)run_direct();
          const auto t1 = clock::now();
          (void)run_im2col();
          const auto t2 = clock::now();
          direct_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
          im2col_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
        }
        double checksum = 0;
        for (const T v : d[1].data) checksum += double(v);
        for (const T v : d[2].data) checksum += double(v);

        const double vox = double(size) * size * size;
        char line[256];
        std::snprintf(line, sizeof line, "%d,%lld,%d,%s,%.6g,%.6g,%.6g,%.6g,%.6g,%.9g\n", size,
                      (long long)M, s, ok ? "OK" : "FAIL", direct_ms, im2col_ms,
                      direct_ms > 0 ? vox / (direct_ms / 1e3) : 0.0,
                      im2col_ms > 0 ? vox / (im2col_ms / 1e3) : 0.0,
                      im2col_ms > 0 ? im2col_ms / direct_ms : 0.0, checksum);
        out << line;
        if (!ok) return false;
      }
  return all_ok;
}

}  // namespace prmseg
