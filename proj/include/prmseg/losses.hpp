#pragma once

#include <cmath>
#include <memory>

#include "prmseg/ops.hpp"
#include "prmseg/volume.hpp"

namespace prmseg {

inline constexpr double kDiceEps = 1e-5;

namespace ops {

// Soft Dice loss 1 - (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps) over the single
// foreground-probability channel. The mask is a constant, not a tape node.
template <typename T>
int soft_dice_loss(Tape<T>& tape, int prob_fg, const MaskVolume& gt) {
  const Tensor<T>& p = tape.val(prob_fg);
  if (p.shape.size() != 4 || p.shape[3] != 1)
    throw ShapeError("soft_dice_loss: expected a single-channel probability map");
  if (p.numel() != gt.numel())
    throw ShapeError("soft_dice_loss: probability map and mask sizes differ");
  check_binary(gt, "soft_dice_loss");
  auto g = std::make_shared<std::vector<uint8_t>>(gt.data);
  T s_pg = 0, s_p = 0, s_g = 0;
  for (size_t i = 0; i < p.data.size(); ++i) {
    s_p += p.data[i];
    if ((*g)[i]) {
      s_pg += p.data[i];
      s_g += T(1);
    }
  }
  const T num = 2 * s_pg + T(kDiceEps);
  const T den = s_p + s_g + T(kDiceEps);
  const T loss = T(1) - num / den;
  return tape.make_node(
      Tensor<T>::scalar(loss), {prob_fg},
      [prob_fg, g, num, den](Tape<T>& t, int self) {
        const T up = t.grad_buf(self).data[0];
        Tensor<T>& d = t.grad_buf(prob_fg);
        const T inv_den2 = T(1) / (den * den);
        for (size_t i = 0; i < d.data.size(); ++i) {
          const T gi = T((*g)[i]);
          d.data[i] += up * (-(2 * gi * den - num) * inv_den2);
        }
      },
      "soft_dice_loss");
}

// Mean voxelwise cross entropy of 2-channel logits against binary labels,
// log-sum-exp stabilized.
template <typename T>
int cross_entropy_loss(Tape<T>& tape, int logits, const MaskVolume& gt) {
  const Tensor<T>& z = tape.val(logits);
  if (z.shape.size() != 4 || z.shape[3] != 2)
    throw ShapeError("cross_entropy_loss: expected 2-channel logits");
  const int64_t n = z.numel() / 2;
  if (n != gt.numel()) throw ShapeError("cross_entropy_loss: logits and mask sizes differ");
  check_binary(gt, "cross_entropy_loss");
  auto g = std::make_shared<std::vector<uint8_t>>(gt.data);
  T total = 0;
  for (int64_t v = 0; v < n; ++v) {
    const T z0 = z.data[size_t(2 * v)], z1 = z.data[size_t(2 * v + 1)];
    const T m = std::max(z0, z1);
    const T lse = m + std::log(std::exp(z0 - m) + std::exp(z1 - m));
    total += lse - ((*g)[size_t(v)] ? z1 : z0);
  }
  const T loss = total / T(n);
  return tape.make_node(
      Tensor<T>::scalar(loss), {logits},
      [logits, g, n](Tape<T>& t, int self) {
        const T up = t.grad_buf(self).data[0] / T(n);
        const Tensor<T>& z2 = t.val(logits);
        Tensor<T>& d = t.grad_buf(logits);
        for (int64_t v = 0; v < n; ++v) {
          const T z0 = z2.data[size_t(2 * v)], z1 = z2.data[size_t(2 * v + 1)];
          const T m = std::max(z0, z1);
          const T e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
          const T p1 = e1 / (e0 + e1);
          const bool fg = (*g)[size_t(v)] != 0;
          d.data[size_t(2 * v)] += up * ((1 - p1) - (fg ? T(0) : T(1)));
          d.data[size_t(2 * v + 1)] += up * (p1 - (fg ? T(1) : T(0)));
        }
      },
      "cross_entropy_loss");
}

}  // namespace ops

template <typename T>
struct LossValue {
  T total = 0, dice_part = 0, ce_part = 0;
};

template <typename T>
struct LossNodes {
  int total = -1, dice = -1, ce = -1;
  LossValue<T> read(const Tape<T>& tape) const {
    return {tape.val(total).data[0], tape.val(dice).data[0], tape.val(ce).data[0]};
  }
};

// Dice and cross entropy with equal weights, both fed by the same
// 2-channel logits.
template <typename T>
LossNodes<T> segmentation_loss(Tape<T>& tape, int logits, const MaskVolume& gt) {
  LossNodes<T> out;
  const int probs = ops::softmax_channels(tape, logits);
  const int pfg = ops::slice_channel(tape, probs, 1);
  out.dice = ops::soft_dice_loss(tape, pfg, gt);
  out.ce = ops::cross_entropy_loss(tape, logits, gt);
  out.total = ops::add(tape, out.dice, out.ce);
  return out;
}

// Evaluation Dice 2|P^G| / (|P|+|G|); 1.0 when both masks are empty.
inline double dice_score(const MaskVolume& pred, const MaskVolume& gt) {
  if (pred.grid != gt.grid || pred.data.size() != gt.data.size())
    throw ContractError("dice_score: mask shapes differ");
  check_binary(pred, "dice_score");
  check_binary(gt, "dice_score");
  int64_t inter = 0, p = 0, g = 0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    p += pred.data[i];
    g += gt.data[i];
    inter += pred.data[i] & gt.data[i];
  }
  if (p + g == 0) return 1.0;
  return 2.0 * double(inter) / double(p + g);
}

// Argmax over the 2 logit channels; ties go to background.
template <typename T>
MaskVolume binarize_logits(const Tensor<T>& logits) {
  if (logits.shape.size() != 4 || logits.shape[3] != 2)
    throw ShapeError("binarize_logits: expected 2-channel logits");
  MaskVolume m(logits.shape[0]);
  const int64_t n = logits.numel() / 2;
  for (int64_t v = 0; v < n; ++v)
    m.data[size_t(v)] = logits.data[size_t(2 * v + 1)] > logits.data[size_t(2 * v)] ? 1 : 0;
  return m;
}

}  // namespace prmseg
