#pragma once

#include <cmath>
#include <functional>
#include <optional>

#include "prmseg/checkpoint.hpp"
#include "prmseg/losses.hpp"
#include "prmseg/network.hpp"
#include "prmseg/synthdata.hpp"

namespace prmseg {

// Cosine annealing from lr_max at t=0 to lr_min at t=total_steps. Written
// as a convex combination so both endpoints are exact.
struct Schedule {
  double lr_max = 1e-3;
  double lr_min = 1e-6;
  int64_t total_steps = 600;

  double lr_at(int64_t t) const {
    if (t < 0 || t > total_steps)
      throw ContractError("lr_at: step " + std::to_string(t) + " outside [0, " +
                          std::to_string(total_steps) + "]");
    const double w = 0.5 * (1.0 + std::cos(M_PI * double(t) / double(total_steps)));
    return lr_max * w + lr_min * (1.0 - w);
  }
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // decoupled
};

template <typename T>
struct AdamState {
  AdamConfig cfg;
  std::vector<Tensor<T>> m, v;  // parallel to the parameter list
  int64_t step = 0;

  static AdamState init(const std::vector<std::shared_ptr<Parameter<T>>>& params,
                        AdamConfig cfg = {}) {
    AdamState s;
    s.cfg = cfg;
    for (const auto& p : params) {
      s.m.push_back(p->value.shape.empty() ? Tensor<T>::scalar(T(0)) : Tensor<T>(p->value.shape));
      s.v.push_back(p->value.shape.empty() ? Tensor<T>::scalar(T(0)) : Tensor<T>(p->value.shape));
    }
    return s;
  }
};

// Bias-corrected Adam plus decoupled weight decay lr*wd*theta.
template <typename T>
void adam_step(const std::vector<std::shared_ptr<Parameter<T>>>& params, AdamState<T>& state,
               double lr) {
  if (params.size() != state.m.size()) throw ContractError("adam_step: state/parameter mismatch");
  for (const auto& p : params)
    for (T g : p->grad.data)
      if (!std::isfinite(double(g)))
        throw NumericsError("NaN gradient in parameter '" + p->name + "'");
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(state.cfg.beta2, double(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i];
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    for (size_t j = 0; j < p.value.data.size(); ++j) {
      const double g = double(p.grad.data[j]);
      const double mj = state.cfg.beta1 * double(m.data[j]) + (1.0 - state.cfg.beta1) * g;
      const double vj = state.cfg.beta2 * double(v.data[j]) + (1.0 - state.cfg.beta2) * g * g;
      m.data[j] = T(mj);
      v.data[j] = T(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + state.cfg.eps);
      p.value.data[j] =
          T(double(p.value.data[j]) - lr * update - lr * state.cfg.weight_decay * double(p.value.data[j]));
    }
  }
}

struct TrainerConfig {
  int64_t steps = 600;
  int batch = 2;
  double lr_max = 1e-3;
  double lr_min = 1e-6;
  double weight_decay = 1e-4;
  int64_t val_every = 100;
  bool distinct_classes = true;
};

template <typename T>
struct StepRecord {
  int64_t step = 0;
  T loss_total = 0, loss_dice = 0, loss_ce = 0;
  double lr = 0;
  double val_dice = -1;  // < 0 when no validation ran at this step
};

template <typename T>
struct TrainResult {
  std::vector<StepRecord<T>> trace;
  double best_val = -1;
  int64_t best_step = -1;
  bool diverged = false;
};

// One optimization process over a network: owns the optimizer state and the
// episode-sampling RNG so training can be checkpointed and resumed bitwise.
template <typename T>
class Trainer {
 public:
  Trainer(Network<T>& net, TrainerConfig cfg, uint64_t seed)
      : net_(&net),
        cfg_(cfg),
        seed_(seed),
        rng_(derive_seed(seed, 0x7124)),
        state_(AdamState<T>::init(net.parameters(), AdamConfig{0.9, 0.999, 1e-8, cfg.weight_decay})),
        sched_{cfg.lr_max, cfg.lr_min, cfg.steps} {}

  // Forward/backward over the episodes, gradients averaged across the
  // batch, one Adam step at the scheduled rate for the current step index.
  LossValue<T> step_once(const std::vector<Episode>& episodes) {
    for (const auto& p : net_->parameters()) p->zero_grad();
    LossValue<T> mean;
    Tape<T> tape;
    for (const auto& ep : episodes) {
      tape.reset();
      const int logits = net_->forward(tape, to_tensor<T>(ep.target), to_tensor<T>(ep.anchor),
                                       to_tensor<T>(ep.anchor_mask));
      const auto loss = segmentation_loss(tape, logits, ep.target_mask);
      tape.backward(loss.total);
      const auto lv = loss.read(tape);
      mean.total += lv.total;
      mean.dice_part += lv.dice_part;
      mean.ce_part += lv.ce_part;
    }
    const T inv = T(1) / T(episodes.size());
    mean.total *= inv;
    mean.dice_part *= inv;
    mean.ce_part *= inv;
    for (const auto& p : net_->parameters())
      for (T& g : p->grad.data) g *= inv;
    last_lr_ = sched_.lr_at(step_done_);
    adam_step(net_->parameters(), state_, last_lr_);
    ++step_done_;
    return mean;
  }

  // Mean one-shot Dice over deterministic validation episodes, one per seen
  // class, anchors and targets drawn from the val split.
  double validate(const std::vector<ClassPool>& pools) {
    double sum = 0;
    int count = 0;
    for (const auto& pool : pools) {
      Rng vrng(derive_seed(seed_, 0x5A1D, uint64_t(pool.class_id)));
      const auto idxs = pool.indices_with(Split::kVal);
      if (idxs.size() < 2) continue;
      const int a = int(vrng.below(idxs.size()));
      int t = int(vrng.below(idxs.size() - 1));
      if (t >= a) ++t;
      const Episode ep = make_episode(pool, idxs[size_t(a)], idxs[size_t(t)]);
      sum += episode_dice(ep);
      ++count;
    }
    return count ? sum / count : 0.0;
  }

  double episode_dice(const Episode& ep) {
    Tape<T> tape;
    const int logits = net_->forward(tape, to_tensor<T>(ep.target), to_tensor<T>(ep.anchor),
                                     to_tensor<T>(ep.anchor_mask));
    return dice_score(binarize_logits(tape.val(logits)), ep.target_mask);
  }

  using StepSink = std::function<void(const StepRecord<T>&)>;
  using CheckpointSink = std::function<void(int64_t step, bool is_best)>;

  TrainResult<T> train(const std::vector<ClassPool>& pools, StepSink on_step = nullptr,
                       CheckpointSink on_checkpoint = nullptr) {
    TrainResult<T> result;
    while (step_done_ < cfg_.steps) {
      // Snapshot so divergence rolls back to the last good state.
      std::vector<Tensor<T>> snapshot;
      for (const auto& p : net_->parameters()) snapshot.push_back(p->value);
      const Rng rng_before = rng_;
      const AdamState<T> state_before = state_;
      StepRecord<T> rec;
      try {
        const auto episodes = sample_batch(pools, cfg_.batch, rng_, Split::kTrain,
                                           cfg_.distinct_classes);
        const auto lv = step_once(episodes);
        rec.step = step_done_;
        rec.loss_total = lv.total;
        rec.loss_dice = lv.dice_part;
        rec.loss_ce = lv.ce_part;
        rec.lr = last_lr_;
        if (!std::isfinite(double(lv.total))) throw NumericsError("non-finite loss");
      } catch (const NumericsError&) {
        auto& params = net_->parameters();
        for (size_t i = 0; i < params.size(); ++i) params[i]->value = snapshot[i];
        rng_ = rng_before;
        state_ = state_before;
        result.diverged = true;
        break;
      }
      if (cfg_.val_every > 0 && step_done_ % cfg_.val_every == 0) {
        rec.val_dice = validate(pools);
        if (rec.val_dice > best_val_) {
          best_val_ = rec.val_dice;
          best_step_ = step_done_;
          if (on_checkpoint) on_checkpoint(step_done_, true);
        }
      }
      result.trace.push_back(rec);
      if (on_step) on_step(rec);
    }
    result.best_val = best_val_;
    result.best_step = best_step_;
    return result;
  }

  int64_t step_done() const { return step_done_; }
  double best_val() const { return best_val_; }
  int64_t best_step() const { return best_step_; }
  const AdamState<T>& optimizer_state() const { return state_; }
  Rng& rng() { return rng_; }

  // Checkpoint payload: parameters first, then Adam moments as .m/.v.
  std::vector<NamedTensor<T>> snapshot_records() const {
    std::vector<NamedTensor<T>> records;
    const auto& params = net_->parameters();
    for (const auto& p : params) records.push_back({p->name, p->value});
    for (size_t i = 0; i < params.size(); ++i) {
      records.push_back({params[i]->name + ".m", state_.m[i]});
      records.push_back({params[i]->name + ".v", state_.v[i]});
    }
    return records;
  }

  void restore(const std::vector<NamedTensor<T>>& records, int64_t step,
               const std::array<uint64_t, 4>& rng_state, double best_val, int64_t best_step) {
    auto& params = net_->parameters();
    size_t found = 0;
    for (const auto& rec : records) {
      for (size_t i = 0; i < params.size(); ++i) {
        if (rec.name == params[i]->name) {
          if (rec.tensor.shape != params[i]->value.shape)
            throw ConfigError("checkpoint shape mismatch for " + rec.name);
          params[i]->value = rec.tensor;
          ++found;
        } else if (rec.name == params[i]->name + ".m") {
          state_.m[i] = rec.tensor;
        } else if (rec.name == params[i]->name + ".v") {
          state_.v[i] = rec.tensor;
        }
      }
    }
    if (found != params.size())
      throw ConfigError("checkpoint is missing parameters (found " + std::to_string(found) +
                        " of " + std::to_string(params.size()) + ")");
    step_done_ = step;
    state_.step = step;
    rng_.set_state(rng_state);
    best_val_ = best_val;
    best_step_ = best_step;
  }

 private:
  Network<T>* net_;
  TrainerConfig cfg_;
  uint64_t seed_;
  Rng rng_;
  AdamState<T> state_;
  Schedule sched_;
  int64_t step_done_ = 0;
  double last_lr_ = 0;
  double best_val_ = -1;
  int64_t best_step_ = -1;
};

struct OneShotResult {
  std::vector<double> repeat_means;
  std::vector<double> per_target_first_repeat;
  double mean = 0;
  double stddev = 0;  // sample std over repeats
};

// One-shot protocol on a held-out class: the anchor is the pool sample
// closest to the anatomical average; repeats re-draw only the evaluation
// target subset.
template <typename T>
OneShotResult evaluate_one_shot(Network<T>& net, const ClassPool& unseen_pool, int n_eval,
                                uint64_t seed, int repeats = 3) {
  OneShotResult res;
  if (n_eval <= 0 || unseen_pool.samples.size() < 2) return res;
  const int anchor_idx = select_anchor_index(unseen_pool);
  std::vector<int> targets;
  for (int i = 0; i < int(unseen_pool.samples.size()); ++i)
    if (i != anchor_idx) targets.push_back(i);

  for (int r = 0; r < repeats; ++r) {
    Rng rng(derive_seed(seed, 0xE7A1, uint64_t(r)));
    std::vector<int> pick = targets;
    for (size_t i = pick.size() - 1; i > 0; --i)
      std::swap(pick[i], pick[size_t(rng.below(uint64_t(i + 1)))]);
    const int n = std::min<int>(n_eval, int(pick.size()));
    double sum = 0;
    for (int i = 0; i < n; ++i) {
      const Episode ep = make_episode(unseen_pool, anchor_idx, pick[size_t(i)]);
      Tape<T> tape;
      const int logits = net.forward(tape, to_tensor<T>(ep.target), to_tensor<T>(ep.anchor),
                                     to_tensor<T>(ep.anchor_mask));
      const double d = dice_score(binarize_logits(tape.val(logits)), ep.target_mask);
      if (r == 0) res.per_target_first_repeat.push_back(d);
      sum += d;
    }
    res.repeat_means.push_back(sum / n);
  }
  double mean = 0;
  for (double m : res.repeat_means) mean += m;
  mean /= double(res.repeat_means.size());
  double var = 0;
  for (double m : res.repeat_means) var += (m - mean) * (m - mean);
  res.mean = mean;
  res.stddev = res.repeat_means.size() > 1 ? std::sqrt(var / double(res.repeat_means.size() - 1)) : 0.0;
  return res;
}

}  // namespace prmseg
