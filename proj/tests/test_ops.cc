#include <cmath>
#include <complex>
#include <numbers>

#include "doctest.h"
#include "flexio/errors.h"
#include "flexio/ops.h"
#include "oracles.h"
#include "test_util.h"

using namespace flexio;
using flexio::testing::GradCheck;
using flexio::testing::NaiveTimeAttention;
using flexio::testing::Rotate;
using flexio::testing::Probe;
using flexio::testing::RandomTensor;
using flexio::testing::RandomVar;


TEST_CASE("linear matches a direct matrix product") {
  const Var<double> x = RandomVar({2, 3, 4, 5}, 1);
  const Var<double> w = RandomVar({5, 6}, 2);
  const Var<double> b = RandomVar({6}, 3);
  const Var<double> y = ops::Linear(x, w, b);
  CHECK(y.shape() == Shape{2, 3, 4, 6});
  double worst = 0;
  for (std::size_t r = 0; r < 24; ++r) {
    for (std::size_t o = 0; o < 6; ++o) {
      double acc = b.value()[o];
      for (std::size_t i = 0; i < 5; ++i) acc += x.value()[r * 5 + i] * w.value()[i * 6 + o];
      worst = std::max(worst, std::abs(acc - y.value()[r * 6 + o]));
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("shifted conv 1d along time matches a direct convolution with left pad (K-1)/2") {
  const std::size_t cin = 3, cout = 2;
  const int kernel = 4;
  const Var<double> x = RandomVar({1, 7, 2, cin}, 4);
  const Var<double> w = RandomVar({cin, kernel * cout}, 5);
  const Var<double> b = RandomVar({cout}, 6);
  const auto taps = ops::ConvTaps1d(kernel, true);
  const Var<double> y = ops::ShiftedConv(x, w, b, taps);
  const int pad = (kernel - 1) / 2;
  double worst = 0;
  for (int t = 0; t < 7; ++t) {
    for (int f = 0; f < 2; ++f) {
      for (std::size_t o = 0; o < cout; ++o) {
        double acc = b.value()[o];
        for (int k = 0; k < kernel; ++k) {
          const int src = t + k - pad;
          if (src < 0 || src >= 7) continue;
          for (std::size_t i = 0; i < cin; ++i) {
            acc += x.value()[(src * 2 + f) * cin + i] * w.value()[i * kernel * cout + k * cout + o];
          }
        }
        worst = std::max(worst, std::abs(acc - y.value()[(t * 2 + f) * cout + o]));
      }
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("deconv taps are the transpose of conv taps") {
  // <conv(x), y> = <x, deconv(y)> when the deconv uses the transposed kernel layout.
  const std::size_t c = 3;
  const int kernel = 4;
  for (bool time : {true, false}) {
    const Var<double> x = RandomVar({1, 6, 5, c}, 7, 1.0, false);
    const Var<double> y = RandomVar({1, 6, 5, c}, 8, 1.0, false);
    const Tensor<double> w = RandomTensor({c, kernel * c}, 9);
    // Transposed weight: wt[o, k*c + i] = w[i, k*c + o].
    Tensor<double> wt({c, kernel * c});
    for (std::size_t i = 0; i < c; ++i) {
      for (int k = 0; k < kernel; ++k) {
        for (std::size_t o = 0; o < c; ++o) wt[o * kernel * c + k * c + i] = w[i * kernel * c + k * c + o];
      }
    }
    const Var<double> none;
    const auto conv = ops::ShiftedConv(x, Var<double>(w), none, ops::ConvTaps1d(kernel, time));
    const auto deconv = ops::ShiftedConv(y, Var<double>(wt), none, ops::DeconvTaps1d(kernel, time));
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < conv.value().size(); ++i) lhs += conv.value()[i] * y.value()[i];
    for (std::size_t i = 0; i < deconv.value().size(); ++i) rhs += x.value()[i] * deconv.value()[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("rms group norm matches a per-group oracle") {
  const Var<double> x = RandomVar({2, 3, 2, 8}, 10, 3.0);
  const Var<double> s = RandomVar({8}, 11);
  const Var<double> b = RandomVar({8}, 12);
  const Var<double> y = ops::RmsGroupNorm(x, 4, s, b, 1e-5);
  double worst = 0;
  for (std::size_t r = 0; r < 12; ++r) {
    for (std::size_t g = 0; g < 4; ++g) {
      double ms = 0;
      for (std::size_t c = 0; c < 2; ++c) ms += std::pow(x.value()[r * 8 + g * 2 + c], 2) / 2.0;
      for (std::size_t c = 0; c < 2; ++c) {
        const std::size_t ch = g * 2 + c;
        const double ref = x.value()[r * 8 + ch] / std::sqrt(ms + 1e-5) * s.value()[ch] + b.value()[ch];
        worst = std::max(worst, std::abs(ref - y.value()[r * 8 + ch]));
      }
    }
  }
  CHECK(worst < 1e-12);
  CHECK_THROWS_AS(ops::RmsGroupNorm(x, 3, s, b, 1e-5), ConfigError);
}

TEST_CASE("global layer norm gives zero mean, unit variance per batch entry") {
  const Var<double> x = RandomVar({2, 4, 3, 5}, 13, 4.0);
  const Var<double> g(Tensor<double>({5}, 1.0));
  const Var<double> b(Tensor<double>({5}, 0.0));
  const Var<double> y = ops::GlobalLayerNorm(x, g, b, 1e-8);
  for (std::size_t e = 0; e < 2; ++e) {
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < 60; ++i) mean += y.value()[e * 60 + i] / 60;
    for (std::size_t i = 0; i < 60; ++i) var += std::pow(y.value()[e * 60 + i] - mean, 2) / 60;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("rope preserves norms, inverts, and makes dot products depend on offset only") {
  RowMatrix<double> q = RandomTensor({6, 8}, 14).matrix();
  RowMatrix<double> k = RandomTensor({6, 8}, 15).matrix();
  const RowMatrix<double> q0 = q;
  ops::ApplyRope(q, false);
  for (int r = 0; r < 6; ++r) CHECK(q.row(r).norm() == doctest::Approx(q0.row(r).norm()).epsilon(1e-12));
  // Oracle rotation.
  for (int r = 0; r < 6; ++r) {
    const auto ref = Rotate(q0.data() + r * 8, 8, r);
    for (int c = 0; c < 8; ++c) CHECK(q(r, c) == doctest::Approx(ref[c]).epsilon(1e-12));
  }
  ops::ApplyRope(q, true);
  CHECK((q - q0).cwiseAbs().maxCoeff() < 1e-12);
  // Same vector at every position: <R_i a, R_j b> depends only on i - j.
  RowMatrix<double> a(6, 8), bm(6, 8);
  for (int r = 0; r < 6; ++r) {
    a.row(r) = q0.row(0);
    bm.row(r) = k.row(0);
  }
  ops::ApplyRope(a, false);
  ops::ApplyRope(bm, false);
  CHECK(a.row(3).dot(bm.row(1)) == doctest::Approx(a.row(4).dot(bm.row(2))).epsilon(1e-10));
  RowMatrix<double> odd(2, 3);
  CHECK_THROWS_AS(ops::ApplyRope(odd, false), ConfigError);
}

TEST_CASE("attention along time matches a naive implementation") {
  const std::size_t heads = 2, dh = 4;
  for (bool rope : {true, false}) {
    const Var<double> qkv = RandomVar({2, 5, 3, 3 * heads * dh}, 16);
    ops::AttentionLayout layout;
    layout.axis = ops::SeqAxis::kTime;
    layout.rope = rope;
    const Var<double> y = ops::Attention(qkv, heads, dh, layout);
    const Tensor<double> ref = NaiveTimeAttention(qkv.value(), heads, dh, rope);
    CHECK(flexio::testing::MaxAbsDiff(y.value(), ref) < 1e-12);
  }
}

TEST_CASE("attention along frequency equals time attention on the transposed map") {
  const std::size_t heads = 2, dh = 4, c = 3 * heads * dh;
  const Var<double> qkv = RandomVar({1, 3, 5, c}, 17);
  Tensor<double> tr({1, 5, 3, c});
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t f = 0; f < 5; ++f) {
      for (std::size_t k = 0; k < c; ++k) tr[(f * 3 + t) * c + k] = qkv.value()[(t * 5 + f) * c + k];
    }
  }
  ops::AttentionLayout layout;
  layout.axis = ops::SeqAxis::kFreq;
  const Var<double> y = ops::Attention(qkv, heads, dh, layout);
  const Tensor<double> ref = NaiveTimeAttention(tr, heads, dh, true);
  double worst = 0;
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t f = 0; f < 5; ++f) {
      for (std::size_t k = 0; k < heads * dh; ++k) {
        worst = std::max(worst, std::abs(y.value()[(t * 5 + f) * heads * dh + k] - ref[(f * 3 + t) * heads * dh + k]));
      }
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("op gradients match finite differences") {
  const Var<double> none;
  SUBCASE("linear") {
    auto x = RandomVar({2, 3, 2, 4}, 20), w = RandomVar({4, 5}, 21), b = RandomVar({5}, 22);
    CHECK(GradCheck([&] { return Probe(ops::Linear(x, w, b), 1); }, {x, w, b}, 1) < 1e-6);
  }
  SUBCASE("mul add scale") {
    auto a = RandomVar({3, 4}, 23), b = RandomVar({3, 4}, 24);
    CHECK(GradCheck([&] { return Probe(ops::Scale(ops::Add(ops::Mul(a, b), a), 0.7), 2); }, {a, b}, 2) < 1e-6);
  }
  SUBCASE("shifted conv 2d") {
    auto x = RandomVar({2, 4, 5, 3}, 25), w = RandomVar({3, 9 * 2}, 26), b = RandomVar({2}, 27);
    const auto taps = ops::ConvTaps2d(3);
    CHECK(GradCheck([&] { return Probe(ops::ShiftedConv(x, w, b, taps), 3); }, {x, w, b}, 3) < 1e-6);
  }
  SUBCASE("swiglu and prelu") {
    auto x = RandomVar({2, 3, 2, 6}, 28), s = RandomVar({1}, 29, 0.3);
    CHECK(GradCheck([&] { return Probe(ops::PRelu(ops::SwiGlu(x), s), 4); }, {x, s}, 4) < 1e-6);
  }
  SUBCASE("rms group norm") {
    auto x = RandomVar({2, 3, 2, 8}, 30), s = RandomVar({8}, 31), b = RandomVar({8}, 32);
    CHECK(GradCheck([&] { return Probe(ops::RmsGroupNorm(x, 2, s, b, 1e-5), 5); }, {x, s, b}, 5) < 1e-6);
  }
  SUBCASE("global layer norm") {
    auto x = RandomVar({2, 3, 2, 4}, 33), g = RandomVar({4}, 34), b = RandomVar({4}, 35);
    CHECK(GradCheck([&] { return Probe(ops::GlobalLayerNorm(x, g, b, 1e-5), 6); }, {x, g, b}, 6) < 1e-6);
  }
  SUBCASE("attention layouts") {
    for (auto axis : {ops::SeqAxis::kTime, ops::SeqAxis::kFreq, ops::SeqAxis::kChannel}) {
      for (bool shared : {false, true}) {
        ops::AttentionLayout layout;
        layout.axis = axis;
        layout.group = 2;
        layout.shared_weights = shared && axis != ops::SeqAxis::kChannel;
        auto qkv = RandomVar({4, 3, 4, 3 * 2 * 4}, 36);
        CHECK(GradCheck([&] { return Probe(ops::Attention(qkv, 2, 4, layout), 7); }, {qkv}, 7, 24) < 1e-6);
      }
    }
  }
  SUBCASE("reshaping ops") {
    auto x = RandomVar({4, 3, 2, 3}, 37), y = RandomVar({4, 2, 2, 3}, 38), z = RandomVar({4, 3, 2, 2}, 39);
    auto p = RandomVar({3}, 40);
    CHECK(GradCheck([&] { return Probe(ops::GroupBroadcast(ops::GroupMean(x, 2), 2), 8); }, {x}, 8) < 1e-6);
    CHECK(GradCheck([&] { return Probe(ops::ConcatTime(x, y), 9); }, {x, y}, 9) < 1e-6);
    CHECK(GradCheck([&] { return Probe(ops::ConcatLast(x, z), 10); }, {x, z}, 10) < 1e-6);
    CHECK(GradCheck([&] { return Probe(ops::SliceTime(x, 1, 2), 11); }, {x}, 11) < 1e-6);
    CHECK(GradCheck([&] { return Probe(ops::BroadcastPrompt(p, 2, 3, 4), 12); }, {p}, 12) < 1e-6);
    const std::vector<std::size_t> idx{3, 0, 0};
    CHECK(GradCheck([&] { return Probe(ops::GatherBatch(x, idx), 13); }, {x}, 13) < 1e-6);
    auto concat = [&] {
      std::vector<Var<double>> parts{x, x, ops::Scale(x, 2.0)};
      return Probe(ops::ConcatBatch<double>(parts), 14);
    };
    CHECK(GradCheck(concat, {x}, 14) < 1e-6);
  }
  SUBCASE("prompt gate") {
    auto prompts = RandomVar({2, 3, 4, 5}, 41), mix = RandomVar({2, 6, 4, 5}, 42);
    CHECK(GradCheck([&] { return Probe(ops::PromptGate(prompts, mix), 15); }, {prompts, mix}, 15) < 1e-6);
  }
}

TEST_CASE("prompt gate multiplies each prompt state into every frame") {
  const Var<double> prompts = RandomVar({1, 2, 3, 4}, 43);
  const Var<double> mix = RandomVar({1, 5, 3, 4}, 44);
  const Var<double> y = ops::PromptGate(prompts, mix);
  CHECK(y.shape() == Shape{2, 5, 3, 4});
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t t = 0; t < 5; ++t) {
      for (std::size_t i = 0; i < 12; ++i) {
        CHECK(y.value()[(n * 5 + t) * 12 + i] == prompts.value()[n * 12 + i] * mix.value()[t * 12 + i]);
      }
    }
  }
}

TEST_CASE("shape errors are reported as InvalidInput") {
  const Var<double> a = RandomVar({2, 3}, 45), b = RandomVar({3, 2}, 46);
  CHECK_THROWS_AS(ops::Add(a, b), InvalidInput);
  CHECK_THROWS_AS(ops::SwiGlu(RandomVar({1, 1, 1, 3}, 47)), InvalidInput);
  CHECK_THROWS_AS(ops::PromptGate(RandomVar({2, 1, 3, 4}, 48), RandomVar({1, 5, 3, 4}, 49)), InvalidInput);
}

TEST_CASE("backward through a shared subexpression accumulates gradients") {
  Var<double> x = RandomVar({4}, 50);
  const Var<double> y = ops::Mul(x, x);
  Backward(ops::WeightedSum(y, Tensor<double>({4}, 1.0)));
  for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x.value()[i]));
  {
    NoGradGuard guard;
    CHECK_FALSE(ops::Mul(x, x).requires_grad());
  }
  CHECK(ops::Mul(x, x).requires_grad());
}
