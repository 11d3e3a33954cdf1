#include <cmath>

#include "checks.h"
#include "doctest.h"
#include "flexio/errors.h"
#include "flexio/model.h"

using namespace flexio;
using namespace flexio::testing;

namespace {

Waveform RandomWave(std::size_t channels, std::size_t length, std::uint64_t seed) {
  Waveform w = Waveform::Zeros(channels, length);
  const Tensor<double> t = RandomTensor({channels * length}, seed, 0.3);
  std::copy(t.data(), t.data() + t.size(), w.samples.begin());
  return w;
}

template <typename T>
Var<T> Param(FlexioModel<T>& model, const std::string& name) {
  return model.params().Get(name);
}

double FrameDistance(const Var<double>& x, std::size_t a, std::size_t b) {
  const std::size_t t = x.dim(1), per = x.dim(2) * x.dim(3);
  double s = 0;
  for (std::size_t i = 0; i < per; ++i) {
    const double d = x.value()[a * per + i] - x.value()[b * per + i];
    s += d * d;
  }
  (void)t;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("encoder shapes, zero input and weight sharing") {
  FlexioModel<float> medium(ModelConfig::Medium(CommMechanism::kTac));
  const Var<float> z = medium.Encode(RandomTensor<float>({3, 50, 129, 2}, 1));
  CHECK(z.shape() == Shape{3, 50, 129, 64});

  FlexioModel<double> model(ModelConfig::Toy(CommMechanism::kTac));
  Param(model, "encoder.conv.bias").mutable_value().fill(0.0);
  const Var<double> zero = model.Encode(Tensor<double>({2, 6, 9, 2}));
  for (double v : zero.value().values()) CHECK(v == 0.0);

  const Tensor<double> one = RandomTensor({1, 6, 9, 2}, 2);
  Tensor<double> two({2, 6, 9, 2});
  for (std::size_t i = 0; i < two.size(); ++i) two[i] = one[i % one.size()];
  const Var<double> e = model.Encode(two);
  const std::size_t half = e.value().size() / 2;
  for (std::size_t i = 0; i < half; ++i) CHECK(e.value()[i] == e.value()[half + i]);
}

TEST_CASE("prompt attachment and splitting") {
  FlexioModel<double> model(ModelConfig::Toy(CommMechanism::kTac));
  const Var<double> z = RandomVar({2, 10, 5, 16}, 3, 1.0, false);
  const Var<double> one = model.AttachPrompts(z, 1);
  CHECK(one.shape() == Shape{2, 11, 5, 16});
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t f = 0; f < 5; ++f) {
      for (std::size_t d = 0; d < 16; ++d) {
        CHECK(one.value()[((b * 11) * 5 + f) * 16 + d] == model.prompt().value()[d]);
      }
    }
  }
  const Var<double> three = model.AttachPrompts(z, 3);
  CHECK(three.shape() == Shape{2, 13, 5, 16});
  CHECK(FrameDistance(three, 0, 1) == 0.0);
  CHECK(FrameDistance(three, 0, 2) == 0.0);
  for (std::size_t n : {1ul, 3ul}) {
    const PromptSplit<double> s = model.SplitPrompts(model.AttachPrompts(z, n), n);
    CHECK(s.prompts.shape() == Shape{2, n, 5, 16});
    CHECK(SameValues(s.mixture.value(), z.value()));
  }
  CHECK_THROWS_AS(model.AttachPrompts(z, 0), InvalidInput);
}

TEST_CASE("cross-prompt module: identical channels, diverging prompts") {
  FlexioModel<double> model(ModelConfig::Toy(CommMechanism::kTac));
  const Var<double> z = RandomVar({1, 6, 5, 16}, 4, 1.0, false);
  const std::vector<Var<double>> chans{z, z};
  const Var<double> x = model.AttachPrompts(ops::ConcatBatch<double>(chans), 2);
  const Var<double> y = model.CrossPromptForward(x, 2);
  const std::size_t half = y.value().size() / 2;
  for (std::size_t i = 0; i < half; ++i) REQUIRE(y.value()[i] == y.value()[half + i]);
  CHECK(FrameDistance(x, 0, 1) == 0.0);
  CHECK(FrameDistance(y, 0, 1) > 1e-6);
  CHECK_THROWS_AS(model.CrossPromptForward(x, 3), InvalidInput);
}

TEST_CASE("single-channel fallbacks") {
  ModelConfig none = ModelConfig::Toy(CommMechanism::kNone);
  ModelConfig co = ModelConfig::Toy(CommMechanism::kCoAttention);
  none.init_seed = co.init_seed = 5;
  FlexioModel<double> a(none), b(co);
  CHECK(a.params().names() == b.params().names());
  const Waveform w = RandomWave(1, 2000, 6);
  const SeparationResult ra = a.Separate(w, 2), rb = b.Separate(w, 2);
  CHECK(ra.sources.samples == rb.sources.samples);

  // Without communication, other channels never reach the reference.
  Waveform two = RandomWave(2, 2000, 7);
  std::copy(w.samples.begin(), w.samples.end(), two.samples.begin() + 2000);
  const SeparationResult r2 = a.Separate(two, 2, 1);
  CHECK(r2.sources.samples == ra.sources.samples);
}

TEST_CASE("conditional tse gate and speaker equivariance") {
  FlexioModel<double> model(ModelConfig::Toy(CommMechanism::kTac));
  const Var<double> mix = RandomVar({1, 6, 5, 16}, 8, 1.0, false);
  const Var<double> p = RandomVar({1, 2, 5, 16}, 9, 1.0, false);
  const Var<double> y = model.ConditionalTse(p, mix);
  CHECK(y.shape() == Shape{2, 6, 5, 16});
  const Var<double> swapped = ops::ConcatTime(ops::SliceTime(p, 1, 1), ops::SliceTime(p, 0, 1));
  const Var<double> ys = model.ConditionalTse(swapped, mix);
  const std::size_t half = y.value().size() / 2;
  for (std::size_t i = 0; i < half; ++i) {
    REQUIRE(ys.value()[i] == y.value()[half + i]);
    REQUIRE(ys.value()[half + i] == y.value()[i]);
  }
  Tensor<double> ones({1, 1, 5, 16}, 1.0);
  const Var<double> gated = ops::PromptGate(Var<double>(ones), mix);
  CHECK(SameValues(gated.value(), mix.value()));
}

TEST_CASE("decoder forced to a constant mask") {
  FlexioModel<double> model(ModelConfig::Toy(CommMechanism::kTac));
  Param(model, "decoder.deconv.weight").mutable_value().fill(0.0);
  Var<double> bias = Param(model, "decoder.deconv.bias");
  const Waveform w = RandomWave(2, 3000, 10);
  const Waveform ref = Istft(Stft(w, model.config().stft).Channel(1), model.config().stft, 3000);
  for (double gain : {1.0, 2.0}) {
    bias.mutable_value()[0] = gain;
    bias.mutable_value()[1] = 0.0;
    const SeparationResult r = model.Separate(w, 3, 1);
    CHECK(r.sources.channels == 3);
    CHECK(r.sources.length == 3000);
    double worst = 0;
    for (std::size_t n = 0; n < 3; ++n) {
      for (std::size_t i = 0; i < 3000; ++i) worst = std::max(worst, std::abs(r.sources.at(n, i) - gain * ref.at(0, i)));
    }
    CHECK(worst <= 1e-9);
    for (const auto& m : r.masks.values) CHECK(std::abs(m) == doctest::Approx(gain));
  }
}

TEST_CASE("one model serves every channel and prompt count") {
  FlexioModel<float> model(ModelConfig::Toy(CommMechanism::kTac));
  const std::size_t before = model.params().NumElements();
  for (std::size_t m = 1; m <= 5; ++m) {
    const Waveform w = RandomWave(m, 1601, m);
    for (std::size_t n = 1; n <= 5; ++n) {
      const SeparationResult r = model.Separate(w, n);
      CHECK(r.sources.channels == n);
      CHECK(r.sources.length == 1601);
      for (double v : r.sources.samples) REQUIRE(std::isfinite(v));
    }
  }
  CHECK(model.params().NumElements() == before);
  const Waveform w = RandomWave(2, 800, 11);
  CHECK_THROWS_AS(model.Separate(w, 2, 2), ConfigError);
  CHECK_THROWS_AS(model.Separate(w, 0), InvalidInput);
}

TEST_CASE("separation is deterministic") {
  FlexioModel<float> model(ModelConfig::Toy(CommMechanism::kCoAttention));
  const Waveform w = RandomWave(3, 1000, 12);
  CHECK(model.Separate(w, 2).sources.samples == model.Separate(w, 2).sources.samples);
}

TEST_CASE("end-to-end gradients match finite differences") {
  for (CommMechanism c : {CommMechanism::kNone, CommMechanism::kTac, CommMechanism::kCrossChannelAttention,
                          CommMechanism::kCoAttention}) {
    CAPTURE(CommMechanismName(c));
    CHECK(GradEndToEnd(1, c) <= 1e-4);
  }
}

TEST_CASE("every parameter receives a finite gradient") {
  FlexioModel<float> model(ModelConfig::Toy(CommMechanism::kTac));
  const Waveform mix = RandomWave(2, 4000, 13);
  const Waveform ref = RandomWave(2, 4000, 14);
  const ComplexSpec spec = Stft(mix, model.config().stft);
  const ComplexSpec r0 = spec.Channel(0);
  const Var<float> masks = model.ForwardMasks(SpecToPlanes<float>(std::span(&spec, 1)), 2, 2, 0);
  const Var<float> est = MaskedIstft(masks, std::span(&r0, 1), 2, model.config().stft, 4000);
  Backward(PitNegSnrLoss(est, std::span(&ref, 1)));
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    CAPTURE(model.params().names()[i]);
    double norm = 0;
    for (float g : model.params().vars()[i].grad().values()) {
      REQUIRE(std::isfinite(g));
      norm += static_cast<double>(g) * g;
    }
    CHECK(norm > 0.0);
  }
}

TEST_CASE("preset sizes") {
  for (CommMechanism c : {CommMechanism::kTac, CommMechanism::kCrossChannelAttention, CommMechanism::kCoAttention}) {
    const FlexioModel<float> medium(ModelConfig::Medium(c));
    const FlexioModel<float> large(ModelConfig::Large(c));
    MESSAGE(CommMechanismName(c) << ": medium " << medium.params().NumElements() << ", large "
                                 << large.params().NumElements());
    CHECK(large.params().NumElements() > medium.params().NumElements());
  }
  const FlexioModel<float> none(ModelConfig::Medium(CommMechanism::kNone));
  const FlexioModel<float> co(ModelConfig::Medium(CommMechanism::kCoAttention));
  CHECK(none.params().NumElements() == co.params().NumElements());
}

TEST_CASE("model config validation") {
  ModelConfig c = ModelConfig::Toy(CommMechanism::kTac);
  c.tse_blocks = 0;
  CHECK_THROWS_AS(FlexioModel<float>{c}, ConfigError);
  c = ModelConfig::Toy(CommMechanism::kTac);
  c.encoder_kernel = 4;
  CHECK_THROWS_AS(FlexioModel<float>{c}, ConfigError);
}
