#pragma once

#include <vector>

#include "prmseg/kernels.hpp"
#include "prmseg/tape.hpp"

// Tape-recorded versions of the network op vocabulary. Every op validates
// shapes, runs the kernel, and registers the matching vector-Jacobian
// product.

namespace prmseg::ops {

template <typename T>
int conv3d(Tape<T>& tape, int x, int w, int b, int stride = 1, int pad = -1) {
  const Tensor<T>& wv = tape.val(w);
  if (wv.shape.size() != 5) throw ShapeError("conv3d: weight must be 5-axis");
  if (pad < 0) pad = int(wv.shape[0] - 1) / 2;  // "same" for stride 1
  Tensor<T> out = kernels::conv3d_forward(tape.val(x), wv, tape.val(b), stride, pad);
  return tape.make_node(
      std::move(out), {x, w, b},
      [x, w, b, stride, pad](Tape<T>& t, int self) {
        kernels::conv3d_backward(t.val(x), t.val(w), stride, pad, t.grad_buf(self),
                                 t.grad_buf(x), t.grad_buf(w), t.grad_buf(b));
      },
      "conv3d");
}

template <typename T>
int maxpool3d_2x(Tape<T>& tape, int x) {
  auto argmax = std::make_shared<std::vector<int64_t>>();
  Tensor<T> out = kernels::maxpool2_forward(tape.val(x), *argmax);
  return tape.make_node(
      std::move(out), {x},
      [x, argmax](Tape<T>& t, int self) {
        kernels::maxpool2_backward(*argmax, t.grad_buf(self), t.grad_buf(x));
      },
      "maxpool3d_2x");
}

template <typename T>
int upsample3d_2x(Tape<T>& tape, int x) {
  Tensor<T> out = kernels::upsample2_forward(tape.val(x));
  return tape.make_node(
      std::move(out), {x},
      [x](Tape<T>& t, int self) { kernels::upsample2_backward(t.grad_buf(self), t.grad_buf(x)); },
      "upsample3d_2x");
}

template <typename T>
int relu(Tape<T>& tape, int x) {
  Tensor<T> out = tape.val(x);
  for (T& v : out.data) v = v > T(0) ? v : T(0);
  return tape.make_node(
      std::move(out), {x},
      [x](Tape<T>& t, int self) {
        const Tensor<T>& in = t.val(x);
        const Tensor<T>& g = t.grad_buf(self);
        Tensor<T>& d = t.grad_buf(x);
        for (size_t i = 0; i < d.data.size(); ++i)
          if (in.data[i] > T(0)) d.data[i] += g.data[i];
      },
      "relu");
}

template <typename T>
int add(Tape<T>& tape, int a, int b) {
  check_same_shape(tape.val(a), tape.val(b), "add");
  Tensor<T> out = tape.val(a);
  const Tensor<T>& bv = tape.val(b);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
  return tape.make_node(
      std::move(out), {a, b},
      [a, b](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad_buf(self);
        Tensor<T>& da = t.grad_buf(a);
        Tensor<T>& db = t.grad_buf(b);
        for (size_t i = 0; i < g.data.size(); ++i) {
          da.data[i] += g.data[i];
          db.data[i] += g.data[i];
        }
      },
      "add");
}

template <typename T>
int mul(Tape<T>& tape, int a, int b) {
  check_same_shape(tape.val(a), tape.val(b), "mul");
  Tensor<T> out = tape.val(a);
  const Tensor<T>& bv = tape.val(b);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
  return tape.make_node(
      std::move(out), {a, b},
      [a, b](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad_buf(self);
        const Tensor<T>& av = t.val(a);
        const Tensor<T>& bv2 = t.val(b);
        Tensor<T>& da = t.grad_buf(a);
        Tensor<T>& db = t.grad_buf(b);
        for (size_t i = 0; i < g.data.size(); ++i) {
          da.data[i] += g.data[i] * bv2.data[i];
          db.data[i] += g.data[i] * av.data[i];
        }
      },
      "mul");
}

// Concatenates feature maps along the channel axis, order preserved.
template <typename T>
int concat_channels(Tape<T>& tape, const std::vector<int>& xs) {
  if (xs.empty()) throw ContractError("concat_channels: no inputs");
  const Tensor<T>& first = tape.val(xs[0]);
  if (first.shape.size() != 4) throw ShapeError("concat_channels: inputs must be 4-axis");
  int64_t total_c = 0;
  for (int x : xs) {
    const Tensor<T>& v = tape.val(x);
    if (v.shape.size() != 4 || v.shape[0] != first.shape[0] || v.shape[1] != first.shape[1] ||
        v.shape[2] != first.shape[2])
      throw ShapeError("concat_channels: spatial dims mismatch " + v.shape_str() + " vs " +
                       first.shape_str());
    total_c += v.shape[3];
  }
  const int64_t vox = first.shape[0] * first.shape[1] * first.shape[2];
  Tensor<T> out({first.shape[0], first.shape[1], first.shape[2], total_c});
  int64_t base = 0;
  for (int x : xs) {
    const Tensor<T>& v = tape.val(x);
    const int64_t c = v.shape[3];
    parallel_for(vox, [&](int64_t i) {
      const T* src = v.data.data() + i * c;
      T* dst = out.data.data() + i * total_c + base;
      for (int64_t cc = 0; cc < c; ++cc) dst[cc] = src[cc];
    });
    base += c;
  }
  auto inputs = xs;
  return tape.make_node(
      std::move(out), xs,
      [inputs, vox, total_c](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad_buf(self);
        int64_t off = 0;
        for (int x : inputs) {
          Tensor<T>& d = t.grad_buf(x);
          const int64_t c = d.shape[3];
          const int64_t o = off;
          parallel_for(vox, [&](int64_t i) {
            const T* src = g.data.data() + i * total_c + o;
            T* dst = d.data.data() + i * c;
            for (int64_t cc = 0; cc < c; ++cc) dst[cc] += src[cc];
          });
          off += c;
        }
      },
      "concat_channels");
}

template <typename T>
int slice_channel(Tape<T>& tape, int x, int64_t c) {
  const Tensor<T>& v = tape.val(x);
  if (v.shape.size() != 4) throw ShapeError("slice_channel: input must be 4-axis");
  if (c < 0 || c >= v.shape[3]) throw ContractError("slice_channel: channel out of range");
  const int64_t vox = v.shape[0] * v.shape[1] * v.shape[2];
  const int64_t nc = v.shape[3];
  Tensor<T> out({v.shape[0], v.shape[1], v.shape[2], 1});
  for (int64_t i = 0; i < vox; ++i) out.data[size_t(i)] = v.data[size_t(i * nc + c)];
  return tape.make_node(
      std::move(out), {x},
      [x, c, vox, nc](Tape<T>& t, int self) {
        const Tensor<T>& g = t.grad_buf(self);
        Tensor<T>& d = t.grad_buf(x);
        for (int64_t i = 0; i < vox; ++i) d.data[size_t(i * nc + c)] += g.data[size_t(i)];
      },
      "slice_channel");
}

template <typename T>
int softmax_axis0(Tape<T>& tape, int x) {
  Tensor<T> out = kernels::softmax_axis0_forward(tape.val(x));
  return tape.make_node(
      std::move(out), {x},
      [x](Tape<T>& t, int self) {
        kernels::softmax_axis0_backward(t.val(self), t.grad_buf(self), t.grad_buf(x));
      },
      "softmax_axis0");
}

template <typename T>
int softmax_channels(Tape<T>& tape, int x) {
  Tensor<T> out = kernels::softmax_lastaxis_forward(tape.val(x));
  return tape.make_node(
      std::move(out), {x},
      [x](Tape<T>& t, int self) {
        kernels::softmax_lastaxis_backward(t.val(self), t.grad_buf(self), t.grad_buf(x));
      },
      "softmax_channels");
}

template <typename T>
int sum(Tape<T>& tape, int x) {
  const Tensor<T>& v = tape.val(x);
  T s = 0;
  for (T e : v.data) s += e;
  return tape.make_node(
      Tensor<T>::scalar(s), {x},
      [x](Tape<T>& t, int self) {
        const T g = t.grad_buf(self).data[0];
        Tensor<T>& d = t.grad_buf(x);
        for (T& e : d.data) e += g;
      },
      "sum");
}

}  // namespace prmseg::ops
