#include <cmath>

#include "checks.h"
#include "doctest.h"
#include "flexio/channel_comm.h"
#include "flexio/errors.h"

using namespace flexio;
using namespace flexio::testing;

TEST_CASE("tac gives identical outputs for identical channels") {
  const BlockConfig cfg = SmallBlock();
  ParameterStore<double> store;
  Initializer<double> init(1);
  const auto p = CreateTac(store, "tac", cfg.dim, 12, init);
  Jitter(store, 2);
  const Var<double> x = RandomVar({1, 4, 5, 8}, 3, 1.0, false);
  const std::vector<Var<double>> xs{x, x, x};
  const auto y = Tac<double>(xs, p, cfg);
  REQUIRE(y.size() == 3);
  CHECK(SameValues(y[0].value(), y[1].value()));
  CHECK(SameValues(y[0].value(), y[2].value()));
}

TEST_CASE("tac and channel attention are permutation equivariant") {
  for (std::size_t m : {2ul, 3ul, 4ul}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      CHECK(TacEquivarianceError(seed + 10 * m, m) <= 1e-12);
      CHECK(ChAttEquivarianceError(seed + 10 * m, m) <= 1e-12);
    }
  }
}

TEST_CASE("single-channel tac equals plain fully connected layers") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) CHECK(TacSingleChannelError(seed) <= 1e-12);
}

TEST_CASE("channel attention with one channel adds the projected values") {
  const BlockConfig cfg = SmallBlock();
  ParameterStore<double> store;
  Initializer<double> init(4);
  const auto p = CreateChAtt(store, "chatt", cfg.dim, 2, 4, init);
  Jitter(store, 5);
  const Var<double> x = RandomVar({2, 3, 4, 8}, 6, 1.0, false);
  const Var<double> y = CrossChannelAttention(x, 1, p, 2, 4, cfg);
  const Var<double> qkv = ops::Linear(ApplyRmsNorm(x, p.norm, cfg), p.qkv_w, p.qkv_b);
  const std::size_t rows = x.value().size() / 8;
  Tensor<double> v({rows, 8});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < 8; ++c) v.data()[r * 8 + c] = qkv.value()[r * 24 + 16 + c];
  }
  const Var<double> out = ops::Linear(Var<double>(v), p.out_w, p.out_b);
  double worst = 0;
  for (std::size_t i = 0; i < x.value().size(); ++i) {
    worst = std::max(worst, std::abs(y.value()[i] - (x.value()[i] + out.value()[i])));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("channel attention on identical channels matches a single channel") {
  const BlockConfig cfg = SmallBlock();
  ParameterStore<double> store;
  Initializer<double> init(7);
  const auto p = CreateChAtt(store, "chatt", cfg.dim, 2, 4, init);
  const Var<double> x = RandomVar({1, 3, 4, 8}, 8, 1.0, false);
  const std::vector<Var<double>> xs{x, x};
  const auto y = CrossChannelAttention<double>(xs, p, 2, 4, cfg);
  const Var<double> single = CrossChannelAttention(x, 1, p, 2, 4, cfg);
  CHECK(MaxAbsDiff(y[0].value(), single.value()) <= 1e-12);
  CHECK(MaxAbsDiff(y[1].value(), single.value()) <= 1e-12);
}

TEST_CASE("co-attention weights") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CHECK(CoAttentionSingleChannelError(seed) <= 1e-12);
    CHECK(CoAttentionDuplicateError(seed) <= 1e-12);
    for (std::size_t m : {2ul, 3ul, 4ul}) CHECK(CoAttentionInvarianceError(seed, m) <= 1e-12);
  }
  const RowMatrix<double> q = RandomTensor({5, 4}, 1).matrix();
  const RowMatrix<double> a = CoAttentionWeights<double>(std::span(&q, 1), std::span(&q, 1));
  for (Eigen::Index i = 0; i < a.rows(); ++i) CHECK(a.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(CoAttentionWeights<double>({}, {}), InvalidInput);
}

TEST_CASE("channel communication gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    CHECK(GradTac(seed) <= 1e-4);
    CHECK(GradChAtt(seed) <= 1e-4);
    CHECK(GradCoAttention(seed) <= 1e-4);
  }
}

TEST_CASE("mismatched channel shapes are rejected") {
  const BlockConfig cfg = SmallBlock();
  ParameterStore<double> store;
  Initializer<double> init(9);
  const auto tac = CreateTac(store, "tac", cfg.dim, 12, init);
  const auto chatt = CreateChAtt(store, "chatt", cfg.dim, 2, 4, init);
  const std::vector<Var<double>> xs{RandomVar({1, 3, 4, 8}, 1), RandomVar({1, 4, 4, 8}, 2)};
  CHECK_THROWS_AS(Tac<double>(xs, tac, cfg), InvalidInput);
  CHECK_THROWS_AS(CrossChannelAttention<double>(xs, chatt, 2, 4, cfg), InvalidInput);
  CHECK_THROWS_AS(Tac(RandomVar({3, 3, 4, 8}, 3), 2, tac, cfg), InvalidInput);
}

TEST_CASE("mechanism names round trip") {
  for (auto c : {CommMechanism::kNone, CommMechanism::kTac, CommMechanism::kCrossChannelAttention,
                 CommMechanism::kCoAttention}) {
    CHECK(ParseCommMechanism(CommMechanismName(c)) == c);
  }
  CHECK_THROWS_AS(ParseCommMechanism("beamformer"), ConfigError);
}
