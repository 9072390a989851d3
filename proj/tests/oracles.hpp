#pragma once

// Test-only reference implementations, written as plainly as possible and
// kept independent of the kernel code paths they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "prmseg/ops.hpp"
#include "prmseg/rng.hpp"
#include "prmseg/tape.hpp"
#include "prmseg/tensor.hpp"

namespace oracle {

using prmseg::Rng;
using prmseg::Tape;
using prmseg::Tensor;

template <typename T>
Tensor<T> random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.data) v = T(rng.uniform(lo, hi));
  return t;
}

// Direct definition: out(i,j,k,co) = b(co) + sum over kernel taps and input
// channels of in * w, with zero padding.
template <typename T>
Tensor<T> conv3d_ref(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b, int stride,
                     int pad) {
  const int64_t H = in.shape[0], W = in.shape[1], D = in.shape[2], Cin = in.shape[3];
  const int64_t k = w.shape[0], Cout = w.shape[4];
  const int64_t Ho = (H + 2 * pad - k) / stride + 1;
  const int64_t Wo = (W + 2 * pad - k) / stride + 1;
  const int64_t Do = (D + 2 * pad - k) / stride + 1;
  Tensor<T> out({Ho, Wo, Do, Cout});
  for (int64_t i = 0; i < Ho; ++i)
    for (int64_t j = 0; j < Wo; ++j)
      for (int64_t kk = 0; kk < Do; ++kk)
        for (int64_t co = 0; co < Cout; ++co) {
          double acc = double(b.data[size_t(co)]);
          for (int64_t a = 0; a < k; ++a)
            for (int64_t bb = 0; bb < k; ++bb)
              for (int64_t cc = 0; cc < k; ++cc)
                for (int64_t ci = 0; ci < Cin; ++ci) {
                  const int64_t ii = i * stride + a - pad;
                  const int64_t jj = j * stride + bb - pad;
                  const int64_t zz = kk * stride + cc - pad;
                  if (ii < 0 || ii >= H || jj < 0 || jj >= W || zz < 0 || zz >= D) continue;
                  acc += double(in.at4(ii, jj, zz, ci)) *
                         double(w.data[size_t((((a * k + bb) * k + cc) * Cin + ci) * Cout + co)]);
                }
          out.at4(i, j, kk, co) = T(acc);
        }
  return out;
}

template <typename T>
Tensor<T> maxpool2_ref(const Tensor<T>& in) {
  const int64_t H = in.shape[0], W = in.shape[1], D = in.shape[2], C = in.shape[3];
  Tensor<T> out({H / 2, W / 2, D / 2, C});
  for (int64_t i = 0; i < H / 2; ++i)
    for (int64_t j = 0; j < W / 2; ++j)
      for (int64_t k = 0; k < D / 2; ++k)
        for (int64_t c = 0; c < C; ++c) {
          T best = in.at4(2 * i, 2 * j, 2 * k, c);
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int d = 0; d < 2; ++d)
                best = std::max(best, in.at4(2 * i + a, 2 * j + b, 2 * k + d, c));
          out.at4(i, j, k, c) = best;
        }
  return out;
}

template <typename T>
Tensor<T> upsample2_ref(const Tensor<T>& in) {
  const int64_t H = in.shape[0], W = in.shape[1], D = in.shape[2], C = in.shape[3];
  Tensor<T> out({2 * H, 2 * W, 2 * D, C});
  for (int64_t i = 0; i < 2 * H; ++i)
    for (int64_t j = 0; j < 2 * W; ++j)
      for (int64_t k = 0; k < 2 * D; ++k)
        for (int64_t c = 0; c < C; ++c) out.at4(i, j, k, c) = in.at4(i / 2, j / 2, k / 2, c);
  return out;
}

// Correlation volume from its definition: sextuple loop over voxels,
// neighborhood offsets, and channels. The flat neighborhood index is
// recomputed inline.
template <typename T>
Tensor<T> correlation_ref(const Tensor<T>& xt, const Tensor<T>& xa, int s) {
  const int64_t H = xt.shape[0], W = xt.shape[1], D = xt.shape[2], M = xt.shape[3];
  const int r = s / 2;
  Tensor<T> xo({int64_t(s) * s * s, H, W, D});
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j)
      for (int64_t k = 0; k < D; ++k)
        for (int di = -r; di <= r; ++di)
          for (int dj = -r; dj <= r; ++dj)
            for (int dk = -r; dk <= r; ++dk) {
              const int64_t n = (di + r) + (dj + r) * int64_t(s) + (dk + r) * int64_t(s) * s;
              double acc = 0;
              const int64_t ii = i + di, jj = j + dj, kk = k + dk;
              if (ii >= 0 && ii < H && jj >= 0 && jj < W && kk >= 0 && kk < D)
                for (int64_t c = 0; c < M; ++c)
                  acc += double(xa.at4(ii, jj, kk, c)) * double(xt.at4(i, j, k, c));
              xo.data[size_t(((n * H + i) * W + j) * D + k)] = T(acc);
            }
  return xo;
}

template <typename T>
Tensor<T> softmax_axis0_ref(const Tensor<T>& in) {
  const int64_t n0 = in.shape[0];
  const int64_t cols = in.numel() / n0;
  Tensor<T> out(in.shape);
  for (int64_t v = 0; v < cols; ++v) {
    double mx = -1e300;
    for (int64_t n = 0; n < n0; ++n) mx = std::max(mx, double(in.data[size_t(n * cols + v)]));
    double sum = 0;
    for (int64_t n = 0; n < n0; ++n) sum += std::exp(double(in.data[size_t(n * cols + v)]) - mx);
    for (int64_t n = 0; n < n0; ++n)
      out.data[size_t(n * cols + v)] = T(std::exp(double(in.data[size_t(n * cols + v)]) - mx) / sum);
  }
  return out;
}

// Aggregation via the fully materialized route: expand the weight volume to
// (s^3, H*W*D*M), materialize the neighborhood columns of x at the same
// size, take the Hadamard product, and sum over the first axis.
template <typename T>
Tensor<T> aggregate_ref(const Tensor<T>& xw, const Tensor<T>& x, int s) {
  const int64_t H = x.shape[0], W = x.shape[1], D = x.shape[2], M = x.shape[3];
  const int64_t S3 = int64_t(s) * s * s;
  const int64_t HWD = H * W * D;
  const int r = s / 2;
  std::vector<double> expanded(size_t(S3 * HWD * M));
  std::vector<double> columns(size_t(S3 * HWD * M));
  for (int64_t n = 0; n < S3; ++n) {
    const int di = int(n % s) - r, dj = int((n / s) % s) - r, dk = int(n / (s * s)) - r;
    for (int64_t i = 0; i < H; ++i)
      for (int64_t j = 0; j < W; ++j)
        for (int64_t k = 0; k < D; ++k) {
          const int64_t v = (i * W + j) * D + k;
          for (int64_t c = 0; c < M; ++c) {
            const size_t idx = size_t((n * HWD + v) * M + c);
            expanded[idx] = double(xw.data[size_t(n * HWD + v)]);
            const int64_t ii = i + di, jj = j + dj, kk = k + dk;
            columns[idx] = (ii >= 0 && ii < H && jj >= 0 && jj < W && kk >= 0 && kk < D)
                               ? double(x.at4(ii, jj, kk, c))
                               : 0.0;
          }
        }
  }
  Tensor<T> out({H, W, D, M});
  for (int64_t v = 0; v < HWD; ++v)
    for (int64_t c = 0; c < M; ++c) {
      double acc = 0;
      for (int64_t n = 0; n < S3; ++n) {
        const size_t idx = size_t((n * HWD + v) * M + c);
        acc += expanded[idx] * columns[idx];
      }
      out.data[size_t(v * M + c)] = T(acc);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Central finite differences against tape gradients. `build` must assemble
// a scalar loss from the given input node ids; inputs are re-read on every
// evaluation so perturbations take effect.
// ---------------------------------------------------------------------------

inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheck {
  double max_rel_err = 0;
  int checked = 0;
};

template <typename BuildFn>
GradCheck check_gradients(std::vector<Tensor<double>*> inputs, BuildFn&& build, double h = 1e-4,
                          int stride = 1) {
  Tape<double> tape;
  std::vector<int> ids;
  for (auto* t : inputs) ids.push_back(tape.leaf(*t, true));
  const int loss = build(tape, ids);
  tape.backward(loss);
  std::vector<Tensor<double>> grads;
  for (int id : ids)
    grads.push_back(tape.has_grad(id) ? tape.grad_buf(id) : Tensor<double>(tape.val(id).shape));

  const auto eval = [&]() {
    Tape<double> t2;
    std::vector<int> ids2;
    for (auto* t : inputs) ids2.push_back(t2.leaf(*t));
    return t2.val(build(t2, ids2)).data[0];
  };

  GradCheck res;
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (size_t c = 0; c < inputs[i]->data.size(); c += size_t(stride)) {
      double& slot = inputs[i]->data[c];
      const double orig = slot;
      slot = orig + h;
      const double lp = eval();
      slot = orig - h;
      const double lm = eval();
      slot = orig;
      const double fd = (lp - lm) / (2 * h);
      res.max_rel_err = std::max(res.max_rel_err, rel_err(grads[i].data[c], fd));
      ++res.checked;
    }
  }
  return res;
}

// Scalar loss that mixes every output element with fixed pseudo-random
// weights, so gradients reach all coordinates.
template <typename T>
int weighted_sum(Tape<T>& tape, int x, uint64_t seed = 99) {
  Rng rng(seed);
  Tensor<T> w(tape.val(x).shape.empty() ? std::vector<int64_t>{} : tape.val(x).shape);
  if (tape.val(x).shape.empty()) w = Tensor<T>::scalar(T(rng.uniform(0.5, 1.5)));
  for (T& v : w.data) v = T(rng.uniform(-1.0, 1.0));
  const int wn = tape.leaf(std::move(w));
  return prmseg::ops::sum(tape, prmseg::ops::mul(tape, x, wn));
}

}  // namespace oracle
