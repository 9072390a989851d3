#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "prmseg/parallel.hpp"
#include "prmseg/tensor.hpp"

namespace prmseg::kernels {

// ---------------------------------------------------------------------------
// Neighborhood indexing for correlation volumes. Offsets (di,dj,dk) in
// [-s/2, s/2] map to a flat index with di fastest:
//   n = (di+r) + (dj+r)*s + (dk+r)*s^2,  r = s/2.
// ---------------------------------------------------------------------------

inline int neighbor_index(int di, int dj, int dk, int s) {
  const int r = s / 2;
  if (di < -r || di > r || dj < -r || dj > r || dk < -r || dk > r)
    throw ContractError("neighbor offset (" + std::to_string(di) + "," + std::to_string(dj) +
                        "," + std::to_string(dk) + ") out of range for s=" + std::to_string(s));
  return (di + r) + (dj + r) * s + (dk + r) * s * s;
}

inline std::array<int, 3> neighbor_offset(int n, int s) {
  const int r = s / 2;
  return {n % s - r, (n / s) % s - r, n / (s * s) - r};
}

inline void require_odd_s(int s) {
  if (s < 1 || s % 2 == 0)
    throw ConfigError("neighborhood size must be odd and >= 1, got " + std::to_string(s));
}

template <typename T>
inline std::vector<T>& scratch(size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

// ---------------------------------------------------------------------------
// conv3d. input (H,W,D,Cin), weight (k,k,k,Cin,Cout), bias (Cout).
// Zero padding; output dims follow standard conv arithmetic.
// ---------------------------------------------------------------------------

inline int64_t conv_out_dim(int64_t in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b,
                         int stride, int pad) {
  if (in.shape.size() != 4) throw ShapeError("conv3d: input must be 4-axis (H,W,D,C)");
  if (w.shape.size() != 5 || w.shape[0] != w.shape[1] || w.shape[1] != w.shape[2])
    throw ShapeError("conv3d: weight must be (k,k,k,Cin,Cout) with cubic k");
  const int k = int(w.shape[0]);
  if (k % 2 == 0) throw ConfigError("conv3d: kernel size must be odd");
  if (stride < 1) throw ConfigError("conv3d: stride must be >= 1");
  const int64_t H = in.shape[0], W = in.shape[1], D = in.shape[2], Cin = in.shape[3];
  const int64_t Cout = w.shape[4];
  if (w.shape[3] != Cin)
    throw ShapeError("conv3d: input channels " + std::to_string(Cin) +
                     " do not match kernel channels " + std::to_string(w.shape[3]));
  if (b.shape.size() != 1 || b.shape[0] != Cout) throw ShapeError("conv3d: bias must be (Cout)");
  const int64_t Ho = conv_out_dim(H, k, stride, pad);
  const int64_t Wo = conv_out_dim(W, k, stride, pad);
  const int64_t Do = conv_out_dim(D, k, stride, pad);
  if (Ho < 1 || Wo < 1 || Do < 1) throw ShapeError("conv3d: output would be empty");

  Tensor<T> out({Ho, Wo, Do, Cout});
  const T* wp = w.data.data();
  const T* ip = in.data.data();
  T* op = out.data.data();

  parallel_for(Ho * Wo * Do, [&](int64_t v) {
    const int64_t i = v / (Wo * Do), j = (v / Do) % Wo, kk = v % Do;
    std::vector<T>& acc = scratch<T>(size_t(Cout));
    for (int64_t c = 0; c < Cout; ++c) acc[size_t(c)] = b.data[size_t(c)];
    for (int a = 0; a < k; ++a) {
      const int64_t ii = i * stride + a - pad;
      if (ii < 0 || ii >= H) continue;
      for (int bb = 0; bb < k; ++bb) {
        const int64_t jj = j * stride + bb - pad;
        if (jj < 0 || jj >= W) continue;
        for (int cc = 0; cc < k; ++cc) {
          const int64_t zz = kk * stride + cc - pad;
          if (zz < 0 || zz >= D) continue;
          const T* in_vox = ip + ((ii * W + jj) * D + zz) * Cin;
          const T* w_tap = wp + (((int64_t(a) * k + bb) * k + cc) * Cin) * Cout;
          for (int64_t ci = 0; ci < Cin; ++ci) {
            const T xv = in_vox[ci];
            const T* wrow = w_tap + ci * Cout;
            for (int64_t co = 0; co < Cout; ++co) acc[size_t(co)] += xv * wrow[co];
          }
        }
      }
    }
    T* out_vox = op + v * Cout;
    for (int64_t c = 0; c < Cout; ++c) out_vox[c] = acc[size_t(c)];
  });
  return out;
}

template <typename T>
void conv3d_backward(const Tensor<T>& in, const Tensor<T>& w, int stride, int pad,
                     const Tensor<T>& dout, Tensor<T>& din, Tensor<T>& dw, Tensor<T>& db) {
  const int k = int(w.shape[0]);
  const int64_t H = in.shape[0], W = in.shape[1], D = in.shape[2], Cin = in.shape[3];
  const int64_t Cout = w.shape[4];
  const int64_t Ho = dout.shape[0], Wo = dout.shape[1], Do = dout.shape[2];

  // d(input): gather from every output position that read this voxel.
  parallel_for(H * W * D, [&](int64_t v) {
    const int64_t i = v / (W * D), j = (v / D) % W, kk = v % D;
    std::vector<T>& acc = scratch<T>(size_t(Cin));
    std::fill(acc.begin(), acc.begin() + Cin, T(0));
    for (int a = 0; a < k; ++a) {
      const int64_t num_i = i - a + pad;
      if (num_i % stride != 0) continue;
      const int64_t oi = num_i / stride;
      if (oi < 0 || oi >= Ho) continue;
      for (int bb = 0; bb < k; ++bb) {
        const int64_t num_j = j - bb + pad;
        if (num_j % stride != 0) continue;
        const int64_t oj = num_j / stride;
        if (oj < 0 || oj >= Wo) continue;
        for (int cc = 0; cc < k; ++cc) {
          const int64_t num_k = kk - cc + pad;
          if (num_k % stride != 0) continue;
          const int64_t ok = num_k / stride;
          if (ok < 0 || ok >= Do) continue;
          const T* g = dout.data.data() + ((oi * Wo + oj) * Do + ok) * Cout;
          const T* w_tap = w.data.data() + (((int64_t(a) * k + bb) * k + cc) * Cin) * Cout;
          for (int64_t ci = 0; ci < Cin; ++ci) {
            const T* wrow = w_tap + ci * Cout;
            T s = 0;
            for (int64_t co = 0; co < Cout; ++co) s += g[co] * wrow[co];
            acc[size_t(ci)] += s;
          }
        }
      }
    }
    T* d = din.data.data() + v * Cin;
    for (int64_t ci = 0; ci < Cin; ++ci) d[ci] += acc[size_t(ci)];
  });

  // d(weight): one parallel task per (tap, ci) row, full sweep over outputs.
  parallel_for(int64_t(k) * k * k * Cin, [&](int64_t row) {
    const int64_t ci = row % Cin;
    const int64_t tap = row / Cin;
    const int a = int(tap / (k * k)), bb = int((tap / k) % k), cc = int(tap % k);
    std::vector<T>& acc = scratch<T>(size_t(Cout));
    std::fill(acc.begin(), acc.begin() + Cout, T(0));
    for (int64_t oi = 0; oi < Ho; ++oi) {
      const int64_t ii = oi * stride + a - pad;
      if (ii < 0 || ii >= H) continue;
      for (int64_t oj = 0; oj < Wo; ++oj) {
        const int64_t jj = oj * stride + bb - pad;
        if (jj < 0 || jj >= W) continue;
        for (int64_t ok = 0; ok < Do; ++ok) {
          const int64_t zz = ok * stride + cc - pad;
          if (zz < 0 || zz >= D) continue;
          const T xv = in.data[size_t(((ii * W + jj) * D + zz) * Cin + ci)];
          const T* g = dout.data.data() + ((oi * Wo + oj) * Do + ok) * Cout;
          for (int64_t co = 0; co < Cout; ++co) acc[size_t(co)] += xv * g[co];
        }
      }
    }
    T* d = dw.data.data() + (tap * Cin + ci) * Cout;
    for (int64_t co = 0; co < Cout; ++co) d[co] += acc[size_t(co)];
  });

  for (int64_t v = 0; v < Ho * Wo * Do; ++v) {
    const T* g = dout.data.data() + v * Cout;
    for (int64_t co = 0; co < Cout; ++co) db.data[size_t(co)] += g[co];
  }
}

// ---------------------------------------------------------------------------
// 2x max pooling / nearest upsampling.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> maxpool2_forward(const Tensor<T>& in, std::vector<int64_t>& argmax) {
  if (in.shape.size() != 4) throw ShapeError("maxpool3d_2x: input must be 4-axis");
  const int64_t H = in.shape[0], W = in.shape[1], D = in.shape[2], C = in.shape[3];
  if (H % 2 || W % 2 || D % 2)
    throw ShapeError("maxpool3d_2x: spatial dims must be even, got " + in.shape_str());
  Tensor<T> out({H / 2, W / 2, D / 2, C});
  argmax.assign(size_t(out.numel()), 0);
  const int64_t Wo = W / 2, Do = D / 2;
  parallel_for(out.numel() / C, [&](int64_t v) {
    const int64_t i = v / (Wo * Do), j = (v / Do) % Wo, kk = v % Do;
    for (int64_t c = 0; c < C; ++c) {
      T best = in.at4(2 * i, 2 * j, 2 * kk, c);
      int64_t best_idx = ((2 * i * W + 2 * j) * D + 2 * kk) * C + c;
      for (int di = 0; di < 2; ++di)
        for (int dj = 0; dj < 2; ++dj)
          for (int dk = 0; dk < 2; ++dk) {
            const int64_t idx = (((2 * i + di) * W + 2 * j + dj) * D + 2 * kk + dk) * C + c;
            const T val = in.data[size_t(idx)];
            if (val > best) {  // strict: ties keep the lowest linear index
              best = val;
              best_idx = idx;
            }
          }
      out.data[size_t(v * C + c)] = best;
      argmax[size_t(v * C + c)] = best_idx;
    }
  });
  return out;
}

template <typename T>
void maxpool2_backward(const std::vector<int64_t>& argmax, const Tensor<T>& dout, Tensor<T>& din) {
  // Disjoint 2^3 blocks: no two output cells share an input voxel.
  parallel_for(dout.numel(), [&](int64_t v) {
    din.data[size_t(argmax[size_t(v)])] += dout.data[size_t(v)];
  });
}

template <typename T>
Tensor<T> upsample2_forward(const Tensor<T>& in) {
  if (in.shape.size() != 4) throw ShapeError("upsample3d_2x: input must be 4-axis");
  const int64_t H = in.shape[0], W = in.shape[1], D = in.shape[2], C = in.shape[3];
  Tensor<T> out({2 * H, 2 * W, 2 * D, C});
  parallel_for(8 * H * W * D, [&](int64_t v) {
    const int64_t i = v / (4 * W * D), j = (v / (2 * D)) % (2 * W), kk = v % (2 * D);
    const T* src = in.data.data() + (((i / 2) * W + j / 2) * D + kk / 2) * C;
    T* dst = out.data.data() + v * C;
    for (int64_t c = 0; c < C; ++c) dst[c] = src[c];
  });
  return out;
}

template <typename T>
void upsample2_backward(const Tensor<T>& dout, Tensor<T>& din) {
  const int64_t H = din.shape[0], W = din.shape[1], D = din.shape[2], C = din.shape[3];
  const int64_t W2 = 2 * W, D2 = 2 * D;
  parallel_for(H * W * D, [&](int64_t v) {
    const int64_t i = v / (W * D), j = (v / D) % W, kk = v % D;
    T* d = din.data.data() + v * C;
    for (int di = 0; di < 2; ++di)
      for (int dj = 0; dj < 2; ++dj)
        for (int dk = 0; dk < 2; ++dk) {
          const T* g = dout.data.data() +
                       (((2 * i + di) * W2 + 2 * j + dj) * D2 + 2 * kk + dk) * C;
          for (int64_t c = 0; c < C; ++c) d[c] += g[c];
        }
  });
}

// ---------------------------------------------------------------------------
// Softmax along axis 0 (correlation weights) and along the last axis
// (channel probabilities). Both max-stabilized.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_axis0_forward(const Tensor<T>& in) {
  if (in.shape.empty()) throw ShapeError("softmax_axis0: input must have at least 1 axis");
  const int64_t n0 = in.shape[0];
  const int64_t cols = in.numel() / n0;
  Tensor<T> out(in.shape);
  parallel_for(cols, [&](int64_t v) {
    T mx = in.data[size_t(v)];
    for (int64_t n = 1; n < n0; ++n) mx = std::max(mx, in.data[size_t(n * cols + v)]);
    T sum = 0;
    for (int64_t n = 0; n < n0; ++n) {
      const T e = std::exp(in.data[size_t(n * cols + v)] - mx);
      out.data[size_t(n * cols + v)] = e;
      sum += e;
    }
    const T inv = T(1) / sum;
    for (int64_t n = 0; n < n0; ++n) out.data[size_t(n * cols + v)] *= inv;
  });
  return out;
}

template <typename T>
void softmax_axis0_backward(const Tensor<T>& y, const Tensor<T>& dout, Tensor<T>& din) {
  const int64_t n0 = y.shape[0];
  const int64_t cols = y.numel() / n0;
  parallel_for(cols, [&](int64_t v) {
    T dot = 0;
    for (int64_t n = 0; n < n0; ++n)
      dot += dout.data[size_t(n * cols + v)] * y.data[size_t(n * cols + v)];
    for (int64_t n = 0; n < n0; ++n) {
      const size_t idx = size_t(n * cols + v);
      din.data[idx] += y.data[idx] * (dout.data[idx] - dot);
    }
  });
}

template <typename T>
Tensor<T> softmax_lastaxis_forward(const Tensor<T>& in) {
  if (in.shape.empty()) throw ShapeError("softmax_channels: input must have at least 1 axis");
  const int64_t nc = in.shape.back();
  const int64_t rows = in.numel() / nc;
  Tensor<T> out(in.shape);
  parallel_for(rows, [&](int64_t v) {
    const T* x = in.data.data() + v * nc;
    T* y = out.data.data() + v * nc;
    T mx = x[0];
    for (int64_t c = 1; c < nc; ++c) mx = std::max(mx, x[c]);
    T sum = 0;
    for (int64_t c = 0; c < nc; ++c) {
      y[c] = std::exp(x[c] - mx);
      sum += y[c];
    }
    const T inv = T(1) / sum;
    for (int64_t c = 0; c < nc; ++c) y[c] *= inv;
  });
  return out;
}

template <typename T>
void softmax_lastaxis_backward(const Tensor<T>& y, const Tensor<T>& dout, Tensor<T>& din) {
  const int64_t nc = y.shape.back();
  const int64_t rows = y.numel() / nc;
  parallel_for(rows, [&](int64_t v) {
    const T* yy = y.data.data() + v * nc;
    const T* g = dout.data.data() + v * nc;
    T dot = 0;
    for (int64_t c = 0; c < nc; ++c) dot += g[c] * yy[c];
    T* d = din.data.data() + v * nc;
    for (int64_t c = 0; c < nc; ++c) d[c] += yy[c] * (g[c] - dot);
  });
}

// ---------------------------------------------------------------------------
// Local correlation. xt, xa are (H,W,D,M); the result is (s^3,H,W,D) holding
// the inner product of the feature vector at each voxel of xt with the
// feature vectors in the s^3 neighborhood of the same location in xa.
// Out-of-bounds neighbors contribute exactly zero.
// ---------------------------------------------------------------------------

template <typename T>
inline void check_correlation_inputs(const Tensor<T>& xt, const Tensor<T>& xa, int s) {
  require_odd_s(s);
  if (xt.shape.size() != 4 || xa.shape.size() != 4)
    throw ShapeError("correlation: feature maps must be 4-axis (H,W,D,M)");
  check_same_shape(xt, xa, "correlation");
}

template <typename T>
Tensor<T> correlation_direct(const Tensor<T>& xt, const Tensor<T>& xa, int s) {
  check_correlation_inputs(xt, xa, s);
  const int64_t H = xt.shape[0], W = xt.shape[1], D = xt.shape[2], M = xt.shape[3];
  const int64_t S3 = int64_t(s) * s * s;
  const int64_t HWD = H * W * D;
  const int r = s / 2;
  Tensor<T> xo({S3, H, W, D});
  parallel_for(HWD, [&](int64_t v) {
    const int64_t i = v / (W * D), j = (v / D) % W, kk = v % D;
    const T* t_vox = xt.data.data() + v * M;
    for (int dk = -r; dk <= r; ++dk)
      for (int dj = -r; dj <= r; ++dj)
        for (int di = -r; di <= r; ++di) {
          const int64_t n = (di + r) + int64_t(dj + r) * s + int64_t(dk + r) * s * s;
          const int64_t ii = i + di, jj = j + dj, zz = kk + dk;
          T dot = 0;
          if (ii >= 0 && ii < H && jj >= 0 && jj < W && zz >= 0 && zz < D) {
            const T* a_vox = xa.data.data() + ((ii * W + jj) * D + zz) * M;
            for (int64_t c = 0; c < M; ++c) dot += a_vox[c] * t_vox[c];
          }
          xo.data[size_t(n * HWD + v)] = dot;
        }
  });
  return xo;
}

// Same result computed the im2col way: neighborhoods of xa are materialized
// into (s^3, H*W*D) column buffers (one channel at a time to bound memory)
// and combined with xt by Hadamard product + accumulation.
template <typename T>
void im2col_channel(const Tensor<T>& x, int64_t c, int s, std::vector<T>& col) {
  const int64_t H = x.shape[0], W = x.shape[1], D = x.shape[2], M = x.shape[3];
  const int64_t HWD = H * W * D;
  const int64_t S3 = int64_t(s) * s * s;
  const int r = s / 2;
  col.resize(size_t(S3 * HWD));
  parallel_for(HWD, [&](int64_t v) {
    const int64_t i = v / (W * D), j = (v / D) % W, kk = v % D;
    for (int n = 0; n < S3; ++n) {
      const auto off = neighbor_offset(n, s);
      const int64_t ii = i + off[0], jj = j + off[1], zz = kk + off[2];
      T val = 0;
      if (ii >= 0 && ii < H && jj >= 0 && jj < W && zz >= 0 && zz < D)
        val = x.data[size_t(((ii * W + jj) * D + zz) * M + c)];
      col[size_t(int64_t(n) * HWD + v)] = val;
    }
  });
}

template <typename T>
Tensor<T> correlation_im2col(const Tensor<T>& xt, const Tensor<T>& xa, int s) {
  check_correlation_inputs(xt, xa, s);
  const int64_t H = xt.shape[0], W = xt.shape[1], D = xt.shape[2], M = xt.shape[3];
  const int64_t S3 = int64_t(s) * s * s;
  const int64_t HWD = H * W * D;
  Tensor<T> xo({S3, H, W, D});
  std::vector<T> col;
  for (int64_t c = 0; c < M; ++c) {
    im2col_channel(xa, c, s, col);
    parallel_for(HWD, [&](int64_t v) {
      const T tv = xt.data[size_t(v * M + c)];
      for (int64_t n = 0; n < S3; ++n)
        xo.data[size_t(n * HWD + v)] += col[size_t(n * HWD + v)] * tv;
    });
  }
  return xo;
}

template <typename T>
void correlation_backward(const Tensor<T>& xt, const Tensor<T>& xa, int s, const Tensor<T>& dout,
                          Tensor<T>& dxt, Tensor<T>& dxa) {
  const int64_t H = xt.shape[0], W = xt.shape[1], D = xt.shape[2], M = xt.shape[3];
  const int64_t S3 = int64_t(s) * s * s;
  const int64_t HWD = H * W * D;
  const int r = s / 2;

  parallel_for(HWD, [&](int64_t v) {
    const int64_t i = v / (W * D), j = (v / D) % W, kk = v % D;
    // d xt[v,:] = sum_n g[n,v] * xa[v+off(n),:]
    {
      T* d = dxt.data.data() + v * M;
      for (int64_t n = 0; n < S3; ++n) {
        const auto off = neighbor_offset(int(n), s);
        const int64_t ii = i + off[0], jj = j + off[1], zz = kk + off[2];
        if (ii < 0 || ii >= H || jj < 0 || jj >= W || zz < 0 || zz >= D) continue;
        const T g = dout.data[size_t(n * HWD + v)];
        const T* a_vox = xa.data.data() + ((ii * W + jj) * D + zz) * M;
        for (int64_t c = 0; c < M; ++c) d[c] += g * a_vox[c];
      }
    }
    // d xa[v,:] = sum_n g[n, v-off(n)] * xt[v-off(n),:]
    {
      T* d = dxa.data.data() + v * M;
      for (int64_t n = 0; n < S3; ++n) {
        const auto off = neighbor_offset(int(n), s);
        const int64_t si = i - off[0], sj = j - off[1], sk = kk - off[2];
        if (si < 0 || si >= H || sj < 0 || sj >= W || sk < 0 || sk >= D) continue;
        const int64_t u = (si * W + sj) * D + sk;
        const T g = dout.data[size_t(n * HWD + u)];
        const T* t_vox = xt.data.data() + u * M;
        for (int64_t c = 0; c < M; ++c) d[c] += g * t_vox[c];
      }
    }
    (void)r;
  });
}

// ---------------------------------------------------------------------------
// Weighted neighborhood aggregation: out[v,c] = sum_n w[n,v] * x[v+off(n),c],
// zero for out-of-bounds taps. The weight volume is broadcast across the
// channel axis rather than materialized per channel.
// ---------------------------------------------------------------------------

template <typename T>
inline int check_aggregate_inputs(const Tensor<T>& xw, const Tensor<T>& x) {
  if (xw.shape.size() != 4 || x.shape.size() != 4)
    throw ShapeError("aggregate: expected (s^3,H,W,D) weights and (H,W,D,M) features");
  const int64_t S3 = xw.shape[0];
  const int s = int(std::llround(std::cbrt(double(S3))));
  if (int64_t(s) * s * s != S3 || s % 2 == 0)
    throw ShapeError("aggregate: weight axis 0 length " + std::to_string(S3) +
                     " is not an odd cube");
  if (xw.shape[1] != x.shape[0] || xw.shape[2] != x.shape[1] || xw.shape[3] != x.shape[2])
    throw ShapeError("aggregate: spatial dims mismatch " + xw.shape_str() + " vs " +
                     x.shape_str());
  return s;
}

template <typename T>
Tensor<T> aggregate_direct(const Tensor<T>& xw, const Tensor<T>& x) {
  const int s = check_aggregate_inputs(xw, x);
  const int64_t H = x.shape[0], W = x.shape[1], D = x.shape[2], M = x.shape[3];
  const int64_t S3 = xw.shape[0];
  const int64_t HWD = H * W * D;
  Tensor<T> out({H, W, D, M});
  parallel_for(HWD, [&](int64_t v) {
    const int64_t i = v / (W * D), j = (v / D) % W, kk = v % D;
    std::vector<T>& acc = scratch<T>(size_t(M));
    std::fill(acc.begin(), acc.begin() + M, T(0));
    for (int64_t n = 0; n < S3; ++n) {
      const auto off = neighbor_offset(int(n), s);
      const int64_t ii = i + off[0], jj = j + off[1], zz = kk + off[2];
      if (ii < 0 || ii >= H || jj < 0 || jj >= W || zz < 0 || zz >= D) continue;
      const T wv = xw.data[size_t(n * HWD + v)];
      const T* x_vox = x.data.data() + ((ii * W + jj) * D + zz) * M;
      for (int64_t c = 0; c < M; ++c) acc[size_t(c)] += wv * x_vox[c];
    }
    T* o = out.data.data() + v * M;
    for (int64_t c = 0; c < M; ++c) o[c] = acc[size_t(c)];
  });
  return out;
}

template <typename T>
Tensor<T> aggregate_im2col(const Tensor<T>& xw, const Tensor<T>& x) {
  const int s = check_aggregate_inputs(xw, x);
  const int64_t H = x.shape[0], W = x.shape[1], D = x.shape[2], M = x.shape[3];
  const int64_t S3 = xw.shape[0];
  const int64_t HWD = H * W * D;
  Tensor<T> out({H, W, D, M});
  std::vector<T> col;
  for (int64_t c = 0; c < M; ++c) {
    im2col_channel(x, c, s, col);
    parallel_for(HWD, [&](int64_t v) {
      T acc = 0;
      for (int64_t n = 0; n < S3; ++n)
        acc += xw.data[size_t(n * HWD + v)] * col[size_t(n * HWD + v)];
      out.data[size_t(v * M + c)] = acc;
    });
  }
  return out;
}

template <typename T>
void aggregate_backward(const Tensor<T>& xw, const Tensor<T>& x, const Tensor<T>& dout,
                        Tensor<T>& dxw, Tensor<T>& dx) {
  const int s = check_aggregate_inputs(xw, x);
  const int64_t H = x.shape[0], W = x.shape[1], D = x.shape[2], M = x.shape[3];
  const int64_t S3 = xw.shape[0];
  const int64_t HWD = H * W * D;
  parallel_for(HWD, [&](int64_t v) {
    const int64_t i = v / (W * D), j = (v / D) % W, kk = v % D;
    // d w[n,v] = <dout[v,:], x[v+off,:]>
    const T* g_vox = dout.data.data() + v * M;
    for (int64_t n = 0; n < S3; ++n) {
      const auto off = neighbor_offset(int(n), s);
      const int64_t ii = i + off[0], jj = j + off[1], zz = kk + off[2];
      if (ii < 0 || ii >= H || jj < 0 || jj >= W || zz < 0 || zz >= D) continue;
      const T* x_vox = x.data.data() + ((ii * W + jj) * D + zz) * M;
      T dot = 0;
      for (int64_t c = 0; c < M; ++c) dot += g_vox[c] * x_vox[c];
      dxw.data[size_t(n * HWD + v)] += dot;
    }
    // d x[v,:] = sum_n w[n, v-off(n)] * dout[v-off(n),:]
    T* d = dx.data.data() + v * M;
    for (int64_t n = 0; n < S3; ++n) {
      const auto off = neighbor_offset(int(n), s);
      const int64_t si = i - off[0], sj = j - off[1], sk = kk - off[2];
      if (si < 0 || si >= H || sj < 0 || sj >= W || sk < 0 || sk >= D) continue;
      const int64_t u = (si * W + sj) * D + sk;
      const T wv = xw.data[size_t(n * HWD + u)];
      const T* g_src = dout.data.data() + u * M;
      for (int64_t c = 0; c < M; ++c) d[c] += wv * g_src[c];
    }
  });
}

}  // namespace prmseg::kernels
