#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "oracles.hpp"
#include "prmseg/prm.hpp"

using namespace prmseg;
using oracle::random_tensor;

namespace {

// 3^3 conv that reproduces its input: center tap identity, zero bias.
Parameter<double>* identity_norm(std::vector<std::unique_ptr<Parameter<double>>>& owner,
                                 const std::string& name, int64_t channels) {
  Tensor<double> w({3, 3, 3, channels, channels});
  for (int64_t c = 0; c < channels; ++c)
    w.data[size_t((((1 * 3 + 1) * 3 + 1) * channels + c) * channels + c)] = 1.0;
  owner.push_back(std::make_unique<Parameter<double>>(name, std::move(w)));
  return owner.back().get();
}

Parameter<double>* zero_bias(std::vector<std::unique_ptr<Parameter<double>>>& owner,
                             const std::string& name, int64_t channels) {
  owner.push_back(std::make_unique<Parameter<double>>(name, Tensor<double>({channels})));
  return owner.back().get();
}

}  // namespace

TEST_CASE("neighbor_index center, extremes, bijectivity, and range check") {
  CHECK(kernels::neighbor_index(0, 0, 0, 3) == 13);
  CHECK(kernels::neighbor_index(-1, -1, -1, 3) == 0);
  CHECK(kernels::neighbor_index(1, 1, 1, 3) == 26);
  CHECK_THROWS_AS(kernels::neighbor_index(2, 0, 0, 3), ContractError);

  for (int s : {1, 3, 5}) {
    std::set<int> seen;
    const int r = s / 2;
    for (int dk = -r; dk <= r; ++dk)
      for (int dj = -r; dj <= r; ++dj)
        for (int di = -r; di <= r; ++di) {
          const int n = kernels::neighbor_index(di, dj, dk, s);
          CHECK(n >= 0);
          CHECK(n < s * s * s);
          seen.insert(n);
          const auto off = kernels::neighbor_offset(n, s);
          CHECK(off[0] == di);
          CHECK(off[1] == dj);
          CHECK(off[2] == dk);
        }
    CHECK(int(seen.size()) == s * s * s);
  }
}

TEST_CASE("correlation with s=1 is the voxelwise inner product") {
  Rng rng(3);
  Tensor<double> xt = random_tensor<double>({3, 3, 3, 4}, rng);
  Tensor<double> xa = random_tensor<double>({3, 3, 3, 4}, rng);
  const Tensor<double> xo = kernels::correlation_direct(xt, xa, 1);
  REQUIRE(xo.shape == std::vector<int64_t>{1, 3, 3, 3});
  for (int64_t v = 0; v < 27; ++v) {
    double dot = 0;
    for (int64_t c = 0; c < 4; ++c) dot += xt.data[size_t(4 * v + c)] * xa.data[size_t(4 * v + c)];
    CHECK(xo.data[size_t(v)] == doctest::Approx(dot).epsilon(1e-12));
  }
}

TEST_CASE("correlation corner voxel of a 2^3 all-ones volume: 8 ones, 19 zeros") {
  const Tensor<double> ones = Tensor<double>::full({2, 2, 2, 1}, 1.0);
  const Tensor<double> xo = kernels::correlation_direct(ones, ones, 3);
  REQUIRE(xo.shape[0] == 27);
  int ones_count = 0, zeros_count = 0;
  for (int n = 0; n < 27; ++n) {
    const double v = xo.data[size_t(n * 8 + 0)];  // voxel (0,0,0)
    if (v == 1.0)
      ++ones_count;
    else if (v == 0.0)
      ++zeros_count;
  }
  CHECK(ones_count == 8);
  CHECK(zeros_count == 19);
}

TEST_CASE("correlation weights: singleton softmax, uniform, corner closed form") {
  Rng rng(5);
  SUBCASE("s=1 weights are exactly one") {
    Tensor<double> xt = random_tensor<double>({2, 2, 2, 3}, rng);
    Tensor<double> xa = random_tensor<double>({2, 2, 2, 3}, rng);
    const auto xw = kernels::softmax_axis0_forward(kernels::correlation_direct(xt, xa, 1));
    for (double v : xw.data) CHECK(v == 1.0);
  }
  SUBCASE("all-zero correlations give uniform 1/27") {
    const Tensor<double> zeros({3, 3, 3, 2});
    const auto xw = kernels::softmax_axis0_forward(kernels::correlation_direct(zeros, zeros, 3));
    for (double v : xw.data) CHECK(v == doctest::Approx(1.0 / 27.0).epsilon(1e-12));
  }
  SUBCASE("corner case weights e/(8e+19) and 1/(8e+19)") {
    const Tensor<double> ones = Tensor<double>::full({2, 2, 2, 1}, 1.0);
    const auto xw = kernels::softmax_axis0_forward(kernels::correlation_direct(ones, ones, 3));
    const double e = std::exp(1.0);
    const double w_in = e / (8 * e + 19), w_out = 1.0 / (8 * e + 19);
    double sum = 0;
    for (int n = 0; n < 27; ++n) {
      const double v = xw.data[size_t(n * 8)];
      CHECK(v == doctest::Approx(v > 0.05 ? w_in : w_out).epsilon(1e-9));
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("aggregate: s=1 identity, corner closed form, shape errors") {
  Rng rng(7);
  SUBCASE("s=1 returns the features unchanged") {
    Tensor<double> xt = random_tensor<double>({3, 3, 3, 2}, rng);
    Tensor<double> xa = random_tensor<double>({3, 3, 3, 2}, rng);
    const auto xw = kernels::softmax_axis0_forward(kernels::correlation_direct(xt, xa, 1));
    const auto out = kernels::aggregate_direct(xw, xa);
    CHECK(out.data == xa.data);
  }
  SUBCASE("corner aggregation equals 8e/(8e+19)") {
    const Tensor<double> ones = Tensor<double>::full({2, 2, 2, 1}, 1.0);
    const auto xw = kernels::softmax_axis0_forward(kernels::correlation_direct(ones, ones, 3));
    const auto out = kernels::aggregate_direct(xw, ones);
    const double e = std::exp(1.0);
    CHECK(out.data[0] == doctest::Approx(8 * e / (8 * e + 19)).epsilon(1e-9));
  }
  SUBCASE("spatial mismatch raises shape error") {
    const Tensor<double> xw({27, 2, 2, 2});
    const Tensor<double> x({3, 3, 3, 1});
    CHECK_THROWS_AS(kernels::aggregate_direct(xw, x), ShapeError);
  }
  SUBCASE("even s rejected") {
    Rng r2(9);
    Tensor<double> xt = random_tensor<double>({2, 2, 2, 1}, r2);
    CHECK_THROWS_AS(kernels::correlation_direct(xt, xt, 2), ConfigError);
  }
}

TEST_CASE("dual path: direct and im2col agree; both match the materialized oracle") {
  SUBCASE("f64 within 1e-12") {
    Rng rng(11);
    for (int trial = 0; trial < 8; ++trial) {
      const int s = std::vector<int>{1, 3, 5}[size_t(rng.below(3))];
      const int64_t dim = 2 + int64_t(rng.below(5));
      const int64_t M = 1 + int64_t(rng.below(4));
      Tensor<double> xt = random_tensor<double>({dim, dim, dim, M}, rng);
      Tensor<double> xa = random_tensor<double>({dim, dim, dim, M}, rng);
      const auto xo_d = kernels::correlation_direct(xt, xa, s);
      const auto xo_c = kernels::correlation_im2col(xt, xa, s);
      const auto xo_ref = oracle::correlation_ref(xt, xa, s);
      for (size_t i = 0; i < xo_d.data.size(); ++i) {
        CHECK(std::abs(xo_d.data[i] - xo_c.data[i]) <= 1e-12);
        CHECK(xo_d.data[i] == doctest::Approx(xo_ref.data[i]).epsilon(1e-12));
      }
      const auto xw = kernels::softmax_axis0_forward(xo_d);
      const auto xp_d = kernels::aggregate_direct(xw, xa);
      const auto xp_c = kernels::aggregate_im2col(xw, xa);
      const auto xp_ref = oracle::aggregate_ref(xw, xa, s);
      for (size_t i = 0; i < xp_d.data.size(); ++i) {
        CHECK(std::abs(xp_d.data[i] - xp_c.data[i]) <= 1e-12);
        CHECK(xp_d.data[i] == doctest::Approx(xp_ref.data[i]).epsilon(1e-10));
      }
    }
  }
  SUBCASE("f32 within 1e-6") {
    Rng rng(13);
    for (int trial = 0; trial < 8; ++trial) {
      const int s = std::vector<int>{1, 3, 5}[size_t(rng.below(3))];
      const int64_t dim = 2 + int64_t(rng.below(5));
      const int64_t M = 1 + int64_t(rng.below(4));
      Tensor<float> xt = random_tensor<float>({dim, dim, dim, M}, rng);
      Tensor<float> xa = random_tensor<float>({dim, dim, dim, M}, rng);
      const auto xo_d = kernels::correlation_direct(xt, xa, s);
      const auto xo_c = kernels::correlation_im2col(xt, xa, s);
      for (size_t i = 0; i < xo_d.data.size(); ++i)
        CHECK(std::abs(double(xo_d.data[i]) - double(xo_c.data[i])) <= 1e-6);
      const auto xw = kernels::softmax_axis0_forward(xo_d);
      const auto xp_d = kernels::aggregate_direct(xw, xa);
      const auto xp_c = kernels::aggregate_im2col(xw, xa);
      for (size_t i = 0; i < xp_d.data.size(); ++i)
        CHECK(std::abs(double(xp_d.data[i]) - double(xp_c.data[i])) <= 1e-6);
    }
  }
}

TEST_CASE("translation equivariance away from the faces") {
  Rng rng(17);
  const int64_t H = 6;
  const int s = 3;
  Tensor<double> xt = random_tensor<double>({H, H, H, 2}, rng);
  Tensor<double> xa = random_tensor<double>({H, H, H, 2}, rng);
  // shift both inputs by +1 along the first axis, fresh noise at the face
  Tensor<double> xt2 = random_tensor<double>({H, H, H, 2}, rng);
  Tensor<double> xa2 = random_tensor<double>({H, H, H, 2}, rng);
  for (int64_t i = 0; i + 1 < H; ++i)
    for (int64_t j = 0; j < H; ++j)
      for (int64_t k = 0; k < H; ++k)
        for (int64_t c = 0; c < 2; ++c) {
          xt2.at4(i + 1, j, k, c) = xt.at4(i, j, k, c);
          xa2.at4(i + 1, j, k, c) = xa.at4(i, j, k, c);
        }

  const auto xo1 = kernels::correlation_direct(xt, xa, s);
  const auto xo2 = kernels::correlation_direct(xt2, xa2, s);
  const auto xw1 = kernels::softmax_axis0_forward(xo1);
  const auto xw2 = kernels::softmax_axis0_forward(xo2);
  const auto xp1 = kernels::aggregate_direct(xw1, xa);
  const auto xp2 = kernels::aggregate_direct(xw2, xa2);

  const int64_t margin = s / 2 + 1;  // floor(s/2) + |delta|
  for (int64_t i = margin; i < H - margin; ++i)
    for (int64_t j = margin; j < H - margin; ++j)
      for (int64_t k = margin; k < H - margin; ++k) {
        for (int64_t n = 0; n < 27; ++n) {
          const auto idx1 = size_t(((n * H + i) * H + j) * H + k);
          const auto idx2 = size_t(((n * H + i + 1) * H + j) * H + k);
          CHECK(xo1.data[idx1] == xo2.data[idx2]);
        }
        for (int64_t c = 0; c < 2; ++c)
          CHECK(xp1.at4(i, j, k, c) == xp2.at4(i + 1, j, k, c));
      }
}

TEST_CASE("prm forward: fused width 3M; s=1 with identity normalization concatenates inputs") {
  std::vector<std::unique_ptr<Parameter<double>>> owner;
  PrmModule<double> prm;
  prm.cfg = PrmConfig{1, 0, 2};
  prm.norm_t_w = identity_norm(owner, "nt.w", 2);
  prm.norm_t_b = zero_bias(owner, "nt.b", 2);
  prm.norm_a_w = identity_norm(owner, "na.w", 2);
  prm.norm_a_b = zero_bias(owner, "na.b", 2);
  prm.norm_m_w = identity_norm(owner, "nm.w", 2);
  prm.norm_m_b = zero_bias(owner, "nm.b", 2);

  Rng rng(19);
  Tensor<double> xt = random_tensor<double>({4, 4, 4, 2}, rng);
  Tensor<double> xa = random_tensor<double>({4, 4, 4, 2}, rng);
  Tensor<double> xm = random_tensor<double>({4, 4, 4, 2}, rng);
  Tape<double> tape;
  const auto out = prm.forward(tape, tape.leaf(xt), tape.leaf(xa), tape.leaf(xm));
  REQUIRE(tape.val(out.fused).shape == std::vector<int64_t>{4, 4, 4, 6});
  for (int64_t v = 0; v < 64; ++v)
    for (int64_t c = 0; c < 2; ++c) {
      CHECK(tape.val(out.fused).data[size_t(6 * v + c)] == doctest::Approx(xt.data[size_t(2 * v + c)]));
      CHECK(tape.val(out.fused).data[size_t(6 * v + 2 + c)] == doctest::Approx(xa.data[size_t(2 * v + c)]));
      CHECK(tape.val(out.fused).data[size_t(6 * v + 4 + c)] == doctest::Approx(xm.data[size_t(2 * v + c)]));
    }
}

TEST_CASE("prm forward matches the composed oracle on a random instance") {
  const int64_t M = 2;
  const int s = 3;
  Rng rng(23);
  std::vector<std::unique_ptr<Parameter<double>>> owner;
  PrmModule<double> prm;
  prm.cfg = PrmConfig{s, 0, M};
  const auto mk_w = [&](const char* name) {
    owner.push_back(
        std::make_unique<Parameter<double>>(name, random_tensor<double>({3, 3, 3, M, M}, rng)));
    return owner.back().get();
  };
  const auto mk_b = [&](const char* name) {
    owner.push_back(std::make_unique<Parameter<double>>(name, random_tensor<double>({M}, rng)));
    return owner.back().get();
  };
  prm.norm_t_w = mk_w("nt.w");
  prm.norm_t_b = mk_b("nt.b");
  prm.norm_a_w = mk_w("na.w");
  prm.norm_a_b = mk_b("na.b");
  prm.norm_m_w = mk_w("nm.w");
  prm.norm_m_b = mk_b("nm.b");

  Tensor<double> xt = random_tensor<double>({4, 4, 4, M}, rng);
  Tensor<double> xa = random_tensor<double>({4, 4, 4, M}, rng);
  Tensor<double> xm = random_tensor<double>({4, 4, 4, M}, rng);

  Tape<double> tape;
  const auto out = prm.forward(tape, tape.leaf(xt), tape.leaf(xa), tape.leaf(xm));

  const auto xht = oracle::conv3d_ref(xt, prm.norm_t_w->value, prm.norm_t_b->value, 1, 1);
  const auto xha = oracle::conv3d_ref(xa, prm.norm_a_w->value, prm.norm_a_b->value, 1, 1);
  const auto xhm = oracle::conv3d_ref(xm, prm.norm_m_w->value, prm.norm_m_b->value, 1, 1);
  const auto xw = oracle::softmax_axis0_ref(oracle::correlation_ref(xht, xha, s));
  const auto xp = oracle::aggregate_ref(xw, xha, s);
  const auto xq = oracle::aggregate_ref(xw, xhm, s);

  const auto& fused = tape.val(out.fused);
  REQUIRE(fused.shape == std::vector<int64_t>{4, 4, 4, 3 * M});
  for (int64_t v = 0; v < 64; ++v)
    for (int64_t c = 0; c < M; ++c) {
      CHECK(fused.data[size_t(3 * M * v + c)] ==
            doctest::Approx(xht.data[size_t(M * v + c)]).epsilon(1e-5));
      CHECK(fused.data[size_t(3 * M * v + M + c)] ==
            doctest::Approx(xp.data[size_t(M * v + c)]).epsilon(1e-5));
      CHECK(fused.data[size_t(3 * M * v + 2 * M + c)] ==
            doctest::Approx(xq.data[size_t(M * v + c)]).epsilon(1e-5));
    }

  // weight volume invariants: axis 0 is exactly s^3, columns sum to 1
  const auto& weights = tape.val(out.weights);
  REQUIRE(weights.shape[0] == int64_t(s) * s * s);
  for (int64_t v = 0; v < 64; ++v) {
    double sum = 0;
    for (int64_t n = 0; n < weights.shape[0]; ++n) sum += weights.data[size_t(n * 64 + v)];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("gradients of correlation and aggregate match finite differences") {
  Rng rng(29);
  SUBCASE("correlation wrt both feature maps") {
    Tensor<double> xt = random_tensor<double>({3, 4, 3, 2}, rng);
    Tensor<double> xa = random_tensor<double>({3, 4, 3, 2}, rng);
    const auto res = oracle::check_gradients({&xt, &xa}, [](Tape<double>& t, const std::vector<int>& ids) {
      return oracle::weighted_sum(t, ops::correlation(t, ids[0], ids[1], 3));
    });
    CHECK(res.max_rel_err < 1e-5);
  }
  SUBCASE("aggregate wrt weights and features") {
    Tensor<double> xt = random_tensor<double>({3, 3, 3, 2}, rng);
    Tensor<double> xa = random_tensor<double>({3, 3, 3, 2}, rng);
    const auto res = oracle::check_gradients({&xt, &xa}, [](Tape<double>& t, const std::vector<int>& ids) {
      const int xw = ops::softmax_axis0(t, ops::correlation(t, ids[0], ids[1], 3));
      return oracle::weighted_sum(t, ops::aggregate(t, xw, ids[1]));
    });
    CHECK(res.max_rel_err < 1e-5);
  }
  SUBCASE("im2col forward path shares the same backward") {
    Tensor<double> xt = random_tensor<double>({3, 3, 3, 2}, rng);
    Tensor<double> xa = random_tensor<double>({3, 3, 3, 2}, rng);
    const auto res = oracle::check_gradients({&xt, &xa}, [](Tape<double>& t, const std::vector<int>& ids) {
      const int xw =
          ops::softmax_axis0(t, ops::correlation(t, ids[0], ids[1], 3, CorrPath::kIm2col));
      return oracle::weighted_sum(t, ops::aggregate(t, xw, ids[1], CorrPath::kIm2col));
    });
    CHECK(res.max_rel_err < 1e-5);
  }
}

TEST_CASE("prm end-to-end gradient check including conv parameters") {
  const int64_t M = 2;
  Rng rng(31);
  Tensor<double> xt = random_tensor<double>({3, 3, 3, M}, rng);
  Tensor<double> xa = random_tensor<double>({3, 3, 3, M}, rng);
  Tensor<double> xm = random_tensor<double>({3, 3, 3, M}, rng);
  Tensor<double> wt = random_tensor<double>({3, 3, 3, M, M}, rng, -0.4, 0.4);
  Tensor<double> wa = random_tensor<double>({3, 3, 3, M, M}, rng, -0.4, 0.4);
  Tensor<double> wm = random_tensor<double>({3, 3, 3, M, M}, rng, -0.4, 0.4);
  Tensor<double> bt = random_tensor<double>({M}, rng);
  Tensor<double> ba = random_tensor<double>({M}, rng);
  Tensor<double> bm = random_tensor<double>({M}, rng);
  const auto res = oracle::check_gradients(
      {&xt, &xa, &xm, &wt, &wa, &wm, &bt, &ba, &bm},
      [](Tape<double>& t, const std::vector<int>& ids) {
        const int xht = ops::conv3d(t, ids[0], ids[3], ids[6]);
        const int xha = ops::conv3d(t, ids[1], ids[4], ids[7]);
        const int xhm = ops::conv3d(t, ids[2], ids[5], ids[8]);
        const int xw = ops::softmax_axis0(t, ops::correlation(t, xht, xha, 3));
        const int xp = ops::aggregate(t, xw, xha);
        const int xq = ops::aggregate(t, xw, xhm);
        return oracle::weighted_sum(t, ops::concat_channels(t, {xht, xp, xq}));
      });
  CHECK(res.max_rel_err < 1e-5);
}
