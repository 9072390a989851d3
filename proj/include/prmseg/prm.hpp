#pragma once

#include <memory>

#include "prmseg/ops.hpp"

namespace prmseg {

// Forward-path flavor for the correlation/aggregation kernels. Both compute
// the same values; direct broadcasts the weights across channels, im2col
// materializes neighborhood columns first.
enum class CorrPath { kDirect, kIm2col };

namespace ops {

// Correlation volume between target and anchor feature maps (s^3,H,W,D).
template <typename T>
int correlation(Tape<T>& tape, int xt, int xa, int s, CorrPath path = CorrPath::kDirect) {
  Tensor<T> out = path == CorrPath::kDirect
                      ? kernels::correlation_direct(tape.val(xt), tape.val(xa), s)
                      : kernels::correlation_im2col(tape.val(xt), tape.val(xa), s);
  return tape.make_node(
      std::move(out), {xt, xa},
      [xt, xa, s](Tape<T>& t, int self) {
        kernels::correlation_backward(t.val(xt), t.val(xa), s, t.grad_buf(self), t.grad_buf(xt),
                                      t.grad_buf(xa));
      },
      "correlation");
}

// Neighborhood-weighted feature transform (H,W,D,M).
template <typename T>
int aggregate(Tape<T>& tape, int xw, int x, CorrPath path = CorrPath::kDirect) {
  Tensor<T> out = path == CorrPath::kDirect ? kernels::aggregate_direct(tape.val(xw), tape.val(x))
                                            : kernels::aggregate_im2col(tape.val(xw), tape.val(x));
  return tape.make_node(
      std::move(out), {xw, x},
      [xw, x](Tape<T>& t, int self) {
        kernels::aggregate_backward(t.val(xw), t.val(x), t.grad_buf(self), t.grad_buf(xw),
                                    t.grad_buf(x));
      },
      "aggregate");
}

}  // namespace ops

struct PrmConfig {
  int s = 3;               // odd neighborhood size
  int level = 0;           // pyramid level this module sits at
  int64_t channels_norm = 0;  // M after the three normalization convs
};

// Pyramid reasoning module. Normalizes the three input streams with 3^3
// convs, correlates target against anchor over the s^3 neighborhood,
// softmax-normalizes, transforms anchor features and anchor-mask features
// with the weights, and fuses by channel concatenation. A 1^3 projection
// brings the pooled fusion back to the encoder channel width so every
// encoder stream keeps an identical architecture regardless of sharing.
template <typename T>
struct PrmModule {
  PrmConfig cfg;
  Parameter<T>* norm_t_w = nullptr;
  Parameter<T>* norm_t_b = nullptr;
  Parameter<T>* norm_a_w = nullptr;
  Parameter<T>* norm_a_b = nullptr;
  Parameter<T>* norm_m_w = nullptr;
  Parameter<T>* norm_m_b = nullptr;
  Parameter<T>* proj_w = nullptr;
  Parameter<T>* proj_b = nullptr;

  struct Out {
    int xht = -1;
    int xha = -1;
    int xhm = -1;
    int raw = -1;      // correlation volume before softmax
    int weights = -1;  // softmax-normalized correlation volume
    int xp = -1;       // transformed anchor features
    int xq = -1;       // transformed anchor-mask features
    int fused = -1;    // concat(xht, xp, xq): 3*channels_norm channels
  };

  std::array<int, 3> normalize(Tape<T>& tape, int xt, int xa, int xm) const {
    const Tensor<T>& tv = tape.val(xt);
    const Tensor<T>& av = tape.val(xa);
    const Tensor<T>& mv = tape.val(xm);
    if (tv.shape[0] != av.shape[0] || tv.shape[1] != av.shape[1] || tv.shape[2] != av.shape[2] ||
        tv.shape[0] != mv.shape[0] || tv.shape[1] != mv.shape[1] || tv.shape[2] != mv.shape[2])
      throw ShapeError("prm: input streams must share spatial dims");
    const int xht = ops::conv3d(tape, xt, tape.param(*norm_t_w), tape.param(*norm_t_b));
    const int xha = ops::conv3d(tape, xa, tape.param(*norm_a_w), tape.param(*norm_a_b));
    const int xhm = ops::conv3d(tape, xm, tape.param(*norm_m_w), tape.param(*norm_m_b));
    return {xht, xha, xhm};
  }

  Out forward(Tape<T>& tape, int xt, int xa, int xm, CorrPath path = CorrPath::kDirect) const {
    Out out;
    const auto norm = normalize(tape, xt, xa, xm);
    out.xht = norm[0];
    out.xha = norm[1];
    out.xhm = norm[2];
    out.raw = ops::correlation(tape, out.xht, out.xha, cfg.s, path);
    out.weights = ops::softmax_axis0(tape, out.raw);
    out.xp = ops::aggregate(tape, out.weights, out.xha, path);
    out.xq = ops::aggregate(tape, out.weights, out.xhm, path);
    out.fused = ops::concat_channels(tape, {out.xht, out.xp, out.xq});
    return out;
  }

  // Channel reduction for the pooled fused tensor feeding the next level.
  int project(Tape<T>& tape, int pooled_fused) const {
    const int y = ops::conv3d(tape, pooled_fused, tape.param(*proj_w), tape.param(*proj_b));
    return ops::relu(tape, y);
  }
};

}  // namespace prmseg
