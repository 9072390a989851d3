#pragma once

#include <array>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "prmseg/prm.hpp"
#include "prmseg/rng.hpp"

namespace prmseg {

// Which encoders share weights. Encoder 1 consumes the target volume,
// encoder 2 the anchor volume, encoder 3 the anchor mask.
enum class SharingMode { kAllShared, kTargetAnchor, kNone, kAnchorMask };

inline const char* sharing_label(SharingMode m) {
  switch (m) {
    case SharingMode::kAllShared: return "[1, 2, 3]";
    case SharingMode::kTargetAnchor: return "[1, 2] + 3";
    case SharingMode::kNone: return "1 + 2 + 3";
    case SharingMode::kAnchorMask: return "1 + [2, 3]";
  }
  return "?";
}

inline SharingMode parse_sharing(const std::string& s) {
  if (s == "[1, 2, 3]" || s == "[1,2,3]" || s == "all_shared") return SharingMode::kAllShared;
  if (s == "[1, 2] + 3" || s == "[1,2]+3" || s == "target_anchor") return SharingMode::kTargetAnchor;
  if (s == "1 + 2 + 3" || s == "1+2+3" || s == "none") return SharingMode::kNone;
  if (s == "1 + [2, 3]" || s == "1+[2,3]" || s == "anchor_mask") return SharingMode::kAnchorMask;
  throw ConfigError("unknown sharing mode '" + s + "'");
}

struct NetworkConfig {
  int levels = 3;
  int64_t base_channels = 4;
  std::vector<int> neighbor_pyramid = {7, 5, 3};
  int prm_count = 3;
  SharingMode sharing = SharingMode::kAnchorMask;
  int64_t patch = 32;

  void validate() const {
    if (levels < 1) throw ConfigError("levels must be >= 1");
    if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
    if (int(neighbor_pyramid.size()) != levels)
      throw ConfigError("neighbor_pyramid must have one entry per level");
    for (size_t i = 0; i < neighbor_pyramid.size(); ++i) {
      const int s = neighbor_pyramid[i];
      if (s < 1 || s % 2 == 0) throw ConfigError("neighbor sizes must be odd and >= 1");
      if (i > 0 && s > neighbor_pyramid[i - 1])
        throw ConfigError("neighbor pyramid must be non-increasing with depth");
    }
    if (prm_count < 0 || prm_count > levels)
      throw ConfigError("prm_count must be in [0, levels]");
    if (patch % (int64_t(1) << levels) != 0)
      throw ConfigError("patch " + std::to_string(patch) + " not divisible by 2^levels");
    if (patch >> levels < 1) throw ConfigError("patch too small for level count");
  }

  int64_t channels_at(int level) const { return base_channels << level; }
  // PRMs occupy the deepest prm_count levels.
  bool prm_at(int level) const { return level >= levels - prm_count; }
};

// 1^3 reduce / 3^3 body / 1^3 expand with ReLU after each conv and a
// residual add when the channel counts match.
template <typename T>
struct BottleneckBlock {
  int64_t in_ch = 0, out_ch = 0;
  Parameter<T>* reduce_w = nullptr;
  Parameter<T>* reduce_b = nullptr;
  Parameter<T>* body_w = nullptr;
  Parameter<T>* body_b = nullptr;
  Parameter<T>* expand_w = nullptr;
  Parameter<T>* expand_b = nullptr;

  static int64_t mid_channels(int64_t in) { return in / 2 > 0 ? in / 2 : 1; }

  int forward(Tape<T>& tape, int x) const {
    int y = ops::relu(tape, ops::conv3d(tape, x, tape.param(*reduce_w), tape.param(*reduce_b)));
    y = ops::relu(tape, ops::conv3d(tape, y, tape.param(*body_w), tape.param(*body_b)));
    y = ops::relu(tape, ops::conv3d(tape, y, tape.param(*expand_w), tape.param(*expand_b)));
    if (in_ch == out_ch) y = ops::add(tape, y, x);
    return y;
  }
};

// Tri-encoder 3D U-Net with pyramid reasoning modules at the deepest
// prm_count skip levels. At a PRM level the fused tensor is the decoder
// skip and, pooled + projected, the target-stream input of the next level;
// the anchor and mask streams always continue from their own pooled
// features. Levels without a PRM fall back to plain skips, so prm_count=0
// is a single-stream U-Net on the target volume.
template <typename T>
class Network {
 public:
  static constexpr int kTarget = 0, kAnchor = 1, kMask = 2;

  struct ForwardTrace {
    std::vector<std::array<int, 3>> stream_features;  // per level, post-block node ids
    std::vector<typename PrmModule<T>::Out> prm;      // valid where fused >= 0
    int logits = -1;
  };

  static Network build(const NetworkConfig& cfg, uint64_t seed) {
    cfg.validate();
    Network net;
    net.cfg_ = cfg;
    Rng rng(seed);

    const auto groups = stream_groups(cfg.sharing);
    // One block stack per distinct group, built in stream order.
    std::array<int, 3> group_block_index{-1, -1, -1};
    for (int stream = 0; stream < 3; ++stream) {
      const int g = groups[stream];
      if (group_block_index[size_t(g)] >= 0) {
        net.enc_of_stream_[size_t(stream)] = group_block_index[size_t(g)];
        continue;
      }
      const std::string gname = group_name(cfg.sharing, stream);
      std::vector<std::array<BottleneckBlock<T>, 2>> levels;
      for (int l = 0; l < cfg.levels; ++l) {
        const int64_t cin = l == 0 ? 1 : cfg.channels_at(l - 1);
        const int64_t cout = cfg.channels_at(l);
        std::array<BottleneckBlock<T>, 2> blocks;
        blocks[0] = net.make_block("enc/" + gname + "/l" + std::to_string(l) + "/b0", cin, cout, rng);
        blocks[1] = net.make_block("enc/" + gname + "/l" + std::to_string(l) + "/b1", cout, cout, rng);
        levels.push_back(blocks);
      }
      net.encoders_.push_back(std::move(levels));
      group_block_index[size_t(g)] = int(net.encoders_.size()) - 1;
      net.enc_of_stream_[size_t(stream)] = group_block_index[size_t(g)];
    }

    // Reasoning modules, deepest-first placement.
    net.prms_.resize(size_t(cfg.levels));
    for (int l = 0; l < cfg.levels; ++l) {
      if (!cfg.prm_at(l)) continue;
      PrmModule<T> prm;
      prm.cfg = PrmConfig{cfg.neighbor_pyramid[size_t(l)], l, cfg.channels_at(l)};
      const int64_t c = cfg.channels_at(l);
      const std::string base = "prm/l" + std::to_string(l) + "/";
      std::array<Parameter<T>*, 3> norm_w{}, norm_b{};
      std::array<int, 3> made{-1, -1, -1};
      for (int stream = 0; stream < 3; ++stream) {
        const int g = groups[stream];
        if (made[size_t(g)] >= 0) {
          norm_w[size_t(stream)] = norm_w[size_t(made[size_t(g)])];
          norm_b[size_t(stream)] = norm_b[size_t(made[size_t(g)])];
          continue;
        }
        const std::string nm = base + "norm_" + group_name(cfg.sharing, stream);
        norm_w[size_t(stream)] = net.make_conv_w(nm + ".w", 3, c, c, rng);
        norm_b[size_t(stream)] = net.make_bias(nm + ".b", c);
        made[size_t(g)] = stream;
      }
      prm.norm_t_w = norm_w[0];
      prm.norm_t_b = norm_b[0];
      prm.norm_a_w = norm_w[1];
      prm.norm_a_b = norm_b[1];
      prm.norm_m_w = norm_w[2];
      prm.norm_m_b = norm_b[2];
      prm.proj_w = net.make_conv_w(base + "proj.w", 1, 3 * c, c, rng);
      prm.proj_b = net.make_bias(base + "proj.b", c);
      net.prms_[size_t(l)] = prm;
    }

    // Decoder, deepest stage first.
    net.decoder_.resize(size_t(cfg.levels));
    for (int l = cfg.levels - 1; l >= 0; --l) {
      const int64_t from_below = l == cfg.levels - 1 ? cfg.channels_at(cfg.levels - 1)
                                                     : cfg.channels_at(l + 1);
      const int64_t skip_ch = cfg.prm_at(l) ? 3 * cfg.channels_at(l) : cfg.channels_at(l);
      net.decoder_[size_t(l)] =
          net.make_block("dec/l" + std::to_string(l), from_below + skip_ch, cfg.channels_at(l), rng);
    }
    net.head_w_ = net.make_conv_w("head.w", 1, cfg.base_channels, 2, rng);
    net.head_b_ = net.make_bias("head.b", 2);
    return net;
  }

  // target/anchor: (P,P,P,1) intensities; mask: (P,P,P,1) with {0,1} values.
  int forward(Tape<T>& tape, const Tensor<T>& target, const Tensor<T>& anchor,
              const Tensor<T>& anchor_mask, ForwardTrace* trace = nullptr,
              CorrPath path = CorrPath::kDirect) const {
    check_input(target, "target");
    check_input(anchor, "anchor");
    check_input(anchor_mask, "anchor_mask");
    for (T v : anchor_mask.data)
      if (v != T(0) && v != T(1)) throw ContractError("anchor mask must be binary");

    if (trace) {
      trace->stream_features.clear();
      trace->prm.assign(size_t(cfg_.levels), {});
    }

    int t = tape.leaf(target);
    int a = tape.leaf(anchor);
    int m = tape.leaf(anchor_mask);
    std::vector<int> skips(size_t(cfg_.levels), -1);
    for (int l = 0; l < cfg_.levels; ++l) {
      t = run_level(tape, kTarget, l, t);
      if (uses_side_streams(l)) {
        a = run_level(tape, kAnchor, l, a);
        m = run_level(tape, kMask, l, m);
      }
      if (trace) trace->stream_features.push_back({t, a, m});
      if (cfg_.prm_at(l)) {
        const auto& prm = *prms_[size_t(l)];
        const auto out = prm.forward(tape, t, a, m, path);
        if (trace) trace->prm[size_t(l)] = out;
        skips[size_t(l)] = out.fused;
        t = prm.project(tape, ops::maxpool3d_2x(tape, out.fused));
      } else {
        skips[size_t(l)] = t;
        t = ops::maxpool3d_2x(tape, t);
      }
      if (l < cfg_.levels - 1 && uses_side_streams(l + 1)) {
        a = ops::maxpool3d_2x(tape, a);
        m = ops::maxpool3d_2x(tape, m);
      }
    }

    int x = t;
    for (int l = cfg_.levels - 1; l >= 0; --l) {
      x = ops::upsample3d_2x(tape, x);
      x = ops::concat_channels(tape, {x, skips[size_t(l)]});
      x = decoder_[size_t(l)].forward(tape, x);
    }
    const int logits = ops::conv3d(tape, x, tape.param(*head_w_), tape.param(*head_b_));
    if (trace) trace->logits = logits;
    return logits;
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p->value.numel();
    return n;
  }

  std::vector<std::shared_ptr<Parameter<T>>>& parameters() { return params_; }
  const std::vector<std::shared_ptr<Parameter<T>>>& parameters() const { return params_; }
  const NetworkConfig& config() const { return cfg_; }

  std::string describe() const {
    std::ostringstream os;
    os << "organnet levels=" << cfg_.levels << " base_channels=" << cfg_.base_channels
       << " patch=" << cfg_.patch << " prm_count=" << cfg_.prm_count << " pyramid=[";
    for (size_t i = 0; i < cfg_.neighbor_pyramid.size(); ++i)
      os << (i ? "," : "") << cfg_.neighbor_pyramid[i];
    os << "] sharing=\"" << sharing_label(cfg_.sharing) << "\"\n";
    for (int l = 0; l < cfg_.levels; ++l) {
      const int64_t cin = l == 0 ? 1 : cfg_.channels_at(l - 1);
      os << "level " << l << ": encoder " << cin << "->" << cfg_.channels_at(l) << " @"
         << (cfg_.patch >> l) << "^3";
      if (cfg_.prm_at(l))
        os << ", prm s=" << cfg_.neighbor_pyramid[size_t(l)] << " fused "
           << 3 * cfg_.channels_at(l) << "ch";
      os << "\n";
    }
    for (int l = cfg_.levels - 1; l >= 0; --l)
      os << "decoder l" << l << ": " << decoder_[size_t(l)].in_ch << "->"
         << decoder_[size_t(l)].out_ch << "\n";
    os << "head: " << cfg_.base_channels << "->2\n";
    os << "parameters: " << params_.size() << " tensors, " << parameter_count() << " scalars\n";
    return os.str();
  }

 private:
  static std::array<int, 3> stream_groups(SharingMode m) {
    switch (m) {
      case SharingMode::kAllShared: return {0, 0, 0};
      case SharingMode::kTargetAnchor: return {0, 0, 2};
      case SharingMode::kNone: return {0, 1, 2};
      case SharingMode::kAnchorMask: return {0, 1, 1};
    }
    return {0, 1, 2};
  }

  static std::string group_name(SharingMode m, int stream) {
    const auto groups = stream_groups(m);
    std::string name;
    static const char* stream_tag[3] = {"t", "a", "m"};
    for (int s = 0; s < 3; ++s)
      if (groups[size_t(s)] == groups[size_t(stream)]) name += stream_tag[s];
    return name;
  }

  // prm_count=0 never reads the anchor or mask streams.
  bool uses_side_streams(int level) const {
    for (int l = level; l < cfg_.levels; ++l)
      if (cfg_.prm_at(l)) return true;
    return false;
  }

  void check_input(const Tensor<T>& x, const char* who) const {
    if (x.shape.size() != 4 || x.shape[0] != cfg_.patch || x.shape[1] != cfg_.patch ||
        x.shape[2] != cfg_.patch || x.shape[3] != 1)
      throw ShapeError(std::string(who) + ": expected (" + std::to_string(cfg_.patch) +
                       "^3,1), got " + x.shape_str());
  }

  Parameter<T>* make_conv_w(const std::string& name, int k, int64_t cin, int64_t cout, Rng& rng) {
    Tensor<T> w({k, k, k, cin, cout});
    const double stddev = std::sqrt(2.0 / double(int64_t(k) * k * k * cin));
    for (T& v : w.data) v = T(rng.gaussian() * stddev);
    params_.push_back(std::make_shared<Parameter<T>>(name, std::move(w)));
    return params_.back().get();
  }

  Parameter<T>* make_bias(const std::string& name, int64_t c) {
    params_.push_back(std::make_shared<Parameter<T>>(name, Tensor<T>({c})));
    return params_.back().get();
  }

  BottleneckBlock<T> make_block(const std::string& name, int64_t cin, int64_t cout, Rng& rng) {
    BottleneckBlock<T> b;
    b.in_ch = cin;
    b.out_ch = cout;
    const int64_t mid = BottleneckBlock<T>::mid_channels(cin);
    b.reduce_w = make_conv_w(name + "/reduce.w", 1, cin, mid, rng);
    b.reduce_b = make_bias(name + "/reduce.b", mid);
    b.body_w = make_conv_w(name + "/body.w", 3, mid, mid, rng);
    b.body_b = make_bias(name + "/body.b", mid);
    b.expand_w = make_conv_w(name + "/expand.w", 1, mid, cout, rng);
    b.expand_b = make_bias(name + "/expand.b", cout);
    return b;
  }

  int run_level(Tape<T>& tape, int stream, int level, int x) const {
    const auto& blocks = encoders_[size_t(enc_of_stream_[size_t(stream)])][size_t(level)];
    return blocks[1].forward(tape, blocks[0].forward(tape, x));
  }

  NetworkConfig cfg_;
  std::vector<std::shared_ptr<Parameter<T>>> params_;
  std::vector<std::vector<std::array<BottleneckBlock<T>, 2>>> encoders_;  // per group
  std::array<int, 3> enc_of_stream_{0, 0, 0};
  std::vector<std::optional<PrmModule<T>>> prms_;
  std::vector<BottleneckBlock<T>> decoder_;
  Parameter<T>* head_w_ = nullptr;
  Parameter<T>* head_b_ = nullptr;
};

}  // namespace prmseg
