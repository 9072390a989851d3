#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "prmseg/losses.hpp"
#include "prmseg/network.hpp"

using namespace prmseg;
using oracle::random_tensor;

namespace {

NetworkConfig small_cfg(SharingMode sharing = SharingMode::kAnchorMask, int prm_count = 2) {
  NetworkConfig cfg;
  cfg.levels = 2;
  cfg.base_channels = 2;
  cfg.neighbor_pyramid = {3, 3};
  cfg.prm_count = prm_count;
  cfg.sharing = sharing;
  cfg.patch = 8;
  return cfg;
}

struct NetInputs {
  Tensor<double> target, anchor, mask;
};

NetInputs random_inputs(int64_t patch, uint64_t seed) {
  Rng rng(seed);
  NetInputs in;
  in.target = random_tensor<double>({patch, patch, patch, 1}, rng, 0.0, 1.0);
  in.anchor = random_tensor<double>({patch, patch, patch, 1}, rng, 0.0, 1.0);
  in.mask = Tensor<double>({patch, patch, patch, 1});
  for (auto& v : in.mask.data) v = rng.below(4) == 0 ? 1.0 : 0.0;
  return in;
}

}  // namespace

TEST_CASE("parameter count ordering across sharing modes") {
  const auto count = [](SharingMode m) {
    return Network<double>::build(small_cfg(m), 1).parameter_count();
  };
  const int64_t all = count(SharingMode::kAllShared);
  const int64_t ta = count(SharingMode::kTargetAnchor);
  const int64_t am = count(SharingMode::kAnchorMask);
  const int64_t none = count(SharingMode::kNone);
  CHECK(all < ta);
  CHECK(ta == am);
  CHECK(am < none);
}

TEST_CASE("doubling base channels roughly quadruples the parameter count") {
  NetworkConfig a = small_cfg();
  NetworkConfig b = small_cfg();
  b.base_channels = 4;
  const double ratio = double(Network<double>::build(b, 1).parameter_count()) /
                       double(Network<double>::build(a, 1).parameter_count());
  CHECK(ratio > 3.0);
  CHECK(ratio < 4.3);
}

TEST_CASE("identical config and seed build identical networks") {
  const auto n1 = Network<double>::build(small_cfg(), 42);
  const auto n2 = Network<double>::build(small_cfg(), 42);
  REQUIRE(n1.parameters().size() == n2.parameters().size());
  CHECK(n1.parameter_count() == n2.parameter_count());
  for (size_t i = 0; i < n1.parameters().size(); ++i) {
    CHECK(n1.parameters()[i]->name == n2.parameters()[i]->name);
    CHECK(n1.parameters()[i]->value.data == n2.parameters()[i]->value.data);
  }
  const auto n3 = Network<double>::build(small_cfg(), 43);
  bool any_diff = false;
  for (size_t i = 0; i < n1.parameters().size(); ++i)
    if (n1.parameters()[i]->value.data != n3.parameters()[i]->value.data) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("invalid configurations are rejected") {
  NetworkConfig cfg = small_cfg();
  cfg.patch = 10;  // not divisible by 2^levels
  CHECK_THROWS_AS(Network<double>::build(cfg, 1), ConfigError);
  cfg = small_cfg();
  cfg.neighbor_pyramid = {3, 5};  // increasing with depth
  CHECK_THROWS_AS(Network<double>::build(cfg, 1), ConfigError);
  cfg = small_cfg();
  cfg.neighbor_pyramid = {4, 3};
  CHECK_THROWS_AS(Network<double>::build(cfg, 1), ConfigError);
  cfg = small_cfg();
  cfg.prm_count = 3;
  CHECK_THROWS_AS(Network<double>::build(cfg, 1), ConfigError);
}

TEST_CASE("forward output is (patch^3, 2) logits and is deterministic") {
  auto net = Network<double>::build(small_cfg(), 7);
  const auto in = random_inputs(8, 11);
  Tape<double> t1, t2;
  const int l1 = net.forward(t1, in.target, in.anchor, in.mask);
  const int l2 = net.forward(t2, in.target, in.anchor, in.mask);
  REQUIRE(t1.val(l1).shape == std::vector<int64_t>{8, 8, 8, 2});
  CHECK(t1.val(l1).data == t2.val(l2).data);
  for (double v : t1.val(l1).data) CHECK(std::isfinite(v));
}

TEST_CASE("streams sharing weights produce identical features for identical inputs") {
  auto net = Network<double>::build(small_cfg(SharingMode::kAnchorMask), 7);
  Rng rng(13);
  Tensor<double> target = random_tensor<double>({8, 8, 8, 1}, rng, 0.0, 1.0);
  Tensor<double> binary({8, 8, 8, 1});
  for (auto& v : binary.data) v = rng.below(3) == 0 ? 1.0 : 0.0;
  Tape<double> tape;
  Network<double>::ForwardTrace trace;
  net.forward(tape, target, binary, binary, &trace);  // anchor == mask input
  for (const auto& level : trace.stream_features)
    CHECK(tape.val(level[1]).data == tape.val(level[2]).data);
}

TEST_CASE("prm_count=0 ignores anchor and mask entirely") {
  auto net = Network<double>::build(small_cfg(SharingMode::kAnchorMask, 0), 7);
  const auto in = random_inputs(8, 17);
  const auto in2 = random_inputs(8, 18);  // different anchor/mask
  Tape<double> t1, t2;
  const int l1 = net.forward(t1, in.target, in.anchor, in.mask);
  const int l2 = net.forward(t2, in.target, in2.anchor, in2.mask);
  CHECK(t1.val(l1).data == t2.val(l2).data);
  CHECK(t1.count_ops("correlation") == 0);
}

TEST_CASE("prm count equals the number of correlation volumes per forward") {
  for (int prm_count = 0; prm_count <= 2; ++prm_count) {
    auto net = Network<double>::build(small_cfg(SharingMode::kNone, prm_count), 7);
    const auto in = random_inputs(8, 19);
    Tape<double> tape;
    net.forward(tape, in.target, in.anchor, in.mask);
    CHECK(tape.count_ops("correlation") == prm_count);
  }
}

TEST_CASE("with PRMs enabled the anchor mask influences the logits") {
  auto net = Network<double>::build(small_cfg(SharingMode::kAnchorMask, 2), 7);
  const auto in = random_inputs(8, 23);
  Tensor<double> mask2 = in.mask;
  for (int64_t v = 0; v < 20; ++v) mask2.data[size_t(v * 7)] = 1.0 - mask2.data[size_t(v * 7)];
  Tape<double> t1, t2;
  const int l1 = net.forward(t1, in.target, in.anchor, in.mask);
  const int l2 = net.forward(t2, in.target, in.anchor, mask2);
  CHECK(t1.val(l1).data != t2.val(l2).data);
}

TEST_CASE("mask input must be binary") {
  auto net = Network<double>::build(small_cfg(), 7);
  auto in = random_inputs(8, 29);
  in.mask.data[3] = 0.5;
  Tape<double> tape;
  CHECK_THROWS_AS(net.forward(tape, in.target, in.anchor, in.mask), ContractError);
}

TEST_CASE("wrong input shape is rejected") {
  auto net = Network<double>::build(small_cfg(), 7);
  Tape<double> tape;
  Tensor<double> bad({4, 4, 4, 1});
  CHECK_THROWS_AS(net.forward(tape, bad, bad, bad), ShapeError);
}

TEST_CASE("under NONE, encoder-3 gradients do not affect encoder-2 updates") {
  const auto run = [&](bool zero_mask_grads) {
    auto net = Network<double>::build(small_cfg(SharingMode::kNone), 7);
    const auto in = random_inputs(8, 31);
    MaskVolume gt(8);
    Rng rng(37);
    for (auto& v : gt.data) v = rng.below(5) == 0 ? 1 : 0;
    Tape<double> tape;
    const int logits = net.forward(tape, in.target, in.anchor, in.mask);
    tape.backward(segmentation_loss(tape, logits, gt).total);
    if (zero_mask_grads)
      for (auto& p : net.parameters())
        if (p->name.rfind("enc/m/", 0) == 0) p->zero_grad();
    // plain gradient step, per-parameter
    std::vector<std::vector<double>> enc_a;
    for (auto& p : net.parameters()) {
      for (size_t i = 0; i < p->value.data.size(); ++i) p->value.data[i] -= 0.01 * p->grad.data[i];
      if (p->name.rfind("enc/a/", 0) == 0) enc_a.push_back(p->value.data);
    }
    return enc_a;
  };
  CHECK(run(false) == run(true));
}

TEST_CASE("describe is deterministic and echoes the architecture") {
  auto net = Network<double>::build(small_cfg(SharingMode::kNone, 1), 7);
  const std::string d1 = net.describe();
  const std::string d2 = Network<double>::build(small_cfg(SharingMode::kNone, 1), 7).describe();
  CHECK(d1 == d2);
  const std::string expected =
      "organnet levels=2 base_channels=2 patch=8 prm_count=1 pyramid=[3,3] sharing=\"1 + 2 + 3\"\n"
      "level 0: encoder 1->2 @8^3\n"
      "level 1: encoder 2->4 @4^3, prm s=3 fused 12ch\n"
      "decoder l1: 16->4\n"
      "decoder l0: 6->2\n"
      "head: 2->2\n"
      "parameters: " +
      std::to_string(net.parameters().size()) + " tensors, " +
      std::to_string(net.parameter_count()) + " scalars\n";
  CHECK(d1 == expected);
}

TEST_CASE("tiny network end-to-end gradients match finite differences") {
  auto net = Network<double>::build(small_cfg(SharingMode::kAnchorMask, 2), 5);
  const auto in = random_inputs(8, 41);
  MaskVolume gt(8);
  Rng rng(43);
  for (auto& v : gt.data) v = rng.below(6) == 0 ? 1 : 0;

  const auto loss_value = [&]() {
    Tape<double> tape;
    const int logits = net.forward(tape, in.target, in.anchor, in.mask);
    return tape.val(segmentation_loss(tape, logits, gt).total).data[0];
  };

  Tape<double> tape;
  const int logits = net.forward(tape, in.target, in.anchor, in.mask);
  for (auto& p : net.parameters()) p->zero_grad();
  tape.backward(segmentation_loss(tape, logits, gt).total);

  double max_err = 0;
  int checked = 0;
  const double h = 1e-4;
  for (auto& p : net.parameters()) {
    const size_t stride = std::max<size_t>(1, p->value.data.size() / 6);
    for (size_t i = 0; i < p->value.data.size(); i += stride) {
      const double orig = p->value.data[i];
      p->value.data[i] = orig + h;
      const double lp = loss_value();
      p->value.data[i] = orig - h;
      const double lm = loss_value();
      p->value.data[i] = orig;
      max_err = std::max(max_err, oracle::rel_err(p->grad.data[i], (lp - lm) / (2 * h)));
      ++checked;
    }
  }
  CHECK(checked > 100);
  CHECK(max_err < 1e-4);
}
