#include "flexio/model.h"

namespace flexio {

ModelConfig ModelConfig::Medium(CommMechanism comm) {
  ModelConfig c;
  c.comm = comm;
  return c;
}

ModelConfig ModelConfig::Large(CommMechanism comm) {
  ModelConfig c;
  c.comm = comm;
  c.dim = 96;
  c.head_dim = 24;
  c.omit_cross_prompt_pre_ffn = false;
  return c;
}

ModelConfig ModelConfig::Toy(CommMechanism comm) {
  ModelConfig c;
  c.comm = comm;
  c.dim = 16;
  c.heads = 2;
  c.head_dim = 8;
  c.tac_hidden = 32;
  c.chatt_heads = 2;
  c.chatt_head_dim = 8;
  c.cross_prompt_blocks = 1;
  c.tse_blocks = 1;
  c.ffn_expansion = 2;
  return c;
}

BlockConfig ModelConfig::CrossPromptBlock() const {
  BlockConfig b;
  b.dim = dim;
  b.heads = heads;
  b.head_dim = head_dim;
  b.conv_kernel = conv_kernel;
  b.conv_stride = conv_stride;
  b.ffn_expansion = ffn_expansion;
  b.omit_pre_mhsa_ffn = omit_cross_prompt_pre_ffn;
  b.norm_groups = norm_groups;
  b.eps = eps;
  return b;
}

BlockConfig ModelConfig::TseBlock() const {
  BlockConfig b = CrossPromptBlock();
  b.omit_pre_mhsa_ffn = false;
  return b;
}

void ModelConfig::Validate() const {
  if (cross_prompt_blocks < 1 || tse_blocks < 1) {
    throw ConfigError("cross_prompt_blocks and tse_blocks must be >= 1");
  }
  if (encoder_kernel < 1 || encoder_kernel % 2 == 0) throw ConfigError("encoder_kernel must be odd");
  if (tac_hidden == 0 || chatt_heads == 0 || chatt_head_dim == 0) {
    throw ConfigError("channel communication dimensions must be positive");
  }
  if (max_prompts == 0) throw ConfigError("max_prompts must be >= 1");
  CrossPromptBlock().Validate();
  stft.Validate();
}

template <typename T>
FlexioModel<T>::FlexioModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.Validate();
  Initializer<T> init(cfg_.init_seed);
  const std::size_t d = cfg_.dim;
  const auto k2 = static_cast<std::size_t>(cfg_.encoder_kernel * cfg_.encoder_kernel);
  enc_w_ = store_.Add("encoder.conv.weight", init.FanIn({2, k2 * d}, 2 * k2));
  enc_b_ = store_.Add("encoder.conv.bias", init.FanIn({d}, 2 * k2));
  enc_gain_ = store_.Add("encoder.norm.gain", Initializer<T>::Constant({d}, T(1)));
  enc_bias_ = store_.Add("encoder.norm.bias", Initializer<T>::Constant({d}, T(0)));
  prompt_ = store_.Add("prompt", init.Normal({d}, 1.0));

  const BlockConfig cross = cfg_.CrossPromptBlock();
  for (std::size_t i = 0; i < cfg_.cross_prompt_blocks; ++i) {
    const std::string prefix = "cross_prompt." + std::to_string(i);
    Block b;
    b.body = CreateLocoformer(store_, prefix, cross, init);
    if (cfg_.comm == CommMechanism::kTac) {
      b.tac = CreateTac(store_, prefix + ".tac", d, cfg_.tac_hidden, init);
    } else if (cfg_.comm == CommMechanism::kCrossChannelAttention) {
      b.chatt = CreateChAtt(store_, prefix + ".chatt", d, cfg_.chatt_heads, cfg_.chatt_head_dim, init);
    }
    cross_blocks_.push_back(std::move(b));
  }
  const BlockConfig tse = cfg_.TseBlock();
  for (std::size_t i = 0; i < cfg_.tse_blocks; ++i) {
    tse_blocks_.push_back(CreateLocoformer(store_, "tse." + std::to_string(i), tse, init));
  }
  dec_w_ = store_.Add("decoder.deconv.weight", init.FanIn({d, k2 * 2}, d * k2));
  dec_b_ = store_.Add("decoder.deconv.bias", Initializer<T>::Constant({2}, T(0)));
}

template <typename T>
Var<T> FlexioModel<T>::Encode(const Tensor<T>& spec_planes) const {
  if (spec_planes.rank() != 4 || spec_planes.dim(3) != 2) {
    throw InvalidInput("Encode: expected [B, T, F, 2] spectrogram planes");
  }
  const auto taps = ops::ConvTaps2d(cfg_.encoder_kernel);
  Var<T> x(spec_planes);
  Var<T> h = ops::ShiftedConv(x, enc_w_, enc_b_, std::span<const ops::ConvTap>(taps));
  return ops::GlobalLayerNorm(h, enc_gain_, enc_bias_, static_cast<T>(cfg_.eps));
}

template <typename T>
Var<T> FlexioModel<T>::AttachPrompts(const Var<T>& z, std::size_t n) const {
  if (n < 1) throw InvalidInput("at least one prompt is required (N >= 1)");
  if (z.shape().size() != 4 || z.dim(3) != cfg_.dim) throw InvalidInput("AttachPrompts: bad feature map");
  Var<T> prompts = ops::BroadcastPrompt(prompt_, z.dim(0), n, z.dim(2));
  return ops::ConcatTime(prompts, z);
}

template <typename T>
Var<T> FlexioModel<T>::CrossPromptForward(const Var<T>& x, std::size_t channels) const {
  if (channels == 0 || x.shape().size() != 4 || x.dim(0) % channels != 0) {
    throw InvalidInput("CrossPromptForward: batch is not a whole number of scenes");
  }
  const BlockConfig bc = cfg_.CrossPromptBlock();
  const std::size_t co_group = cfg_.comm == CommMechanism::kCoAttention ? channels : 1;
  Var<T> h = x;
  for (const auto& block : cross_blocks_) {
    h = LocoformerBlock(h, block.body, bc, co_group);
    if (cfg_.comm == CommMechanism::kTac) {
      h = Tac(h, channels, block.tac, bc);
    } else if (cfg_.comm == CommMechanism::kCrossChannelAttention) {
      h = CrossChannelAttention(h, channels, block.chatt, cfg_.chatt_heads, cfg_.chatt_head_dim, bc);
    }
  }
  return h;
}

template <typename T>
PromptSplit<T> FlexioModel<T>::SplitPrompts(const Var<T>& x, std::size_t n) const {
  if (x.shape().size() != 4 || n < 1 || n >= x.dim(1)) {
    throw InvalidInput("SplitPrompts: prompt count inconsistent with the time axis");
  }
  return {ops::SliceTime(x, 0, n), ops::SliceTime(x, n, x.dim(1) - n)};
}

template <typename T>
Var<T> FlexioModel<T>::ConditionalTse(const Var<T>& prompts, const Var<T>& mixture) const {
  const BlockConfig bc = cfg_.TseBlock();
  Var<T> h = ops::PromptGate(prompts, mixture);
  for (const auto& block : tse_blocks_) h = LocoformerBlock(h, block, bc, 1);
  return h;
}

template <typename T>
Var<T> FlexioModel<T>::DecodeMasks(const Var<T>& features) const {
  // Transposed 2D convolution at stride 1: tap k reads x[t - dt_k, f - df_k].
  auto taps = ops::ConvTaps2d(cfg_.encoder_kernel);
  for (auto& tap : taps) tap = {-tap.dt, -tap.df};
  return ops::ShiftedConv(features, dec_w_, dec_b_, std::span<const ops::ConvTap>(taps));
}

template <typename T>
Var<T> FlexioModel<T>::ForwardMasks(const Tensor<T>& spec_planes, std::size_t channels,
                                    std::size_t speakers, std::size_t ref_channel) const {
  if (channels == 0 || spec_planes.rank() != 4 || spec_planes.dim(0) % channels != 0) {
    throw InvalidInput("ForwardMasks: batch is not a whole number of scenes");
  }
  if (ref_channel >= channels) {
    throw ConfigError("reference channel out of range: " + std::to_string(ref_channel) +
                      " >= " + std::to_string(channels) + " channels");
  }
  if (speakers < 1) throw InvalidInput("at least one prompt is required (N >= 1)");
  const std::size_t scenes = spec_planes.dim(0) / channels;
  Var<T> z = Encode(spec_planes);
  Var<T> h = CrossPromptForward(AttachPrompts(z, speakers), channels);
  std::vector<std::size_t> ref_rows(scenes);
  for (std::size_t s = 0; s < scenes; ++s) ref_rows[s] = s * channels + ref_channel;
  Var<T> ref = ops::GatherBatch(h, std::span<const std::size_t>(ref_rows));
  PromptSplit<T> split = SplitPrompts(ref, speakers);
  return DecodeMasks(ConditionalTse(split.prompts, split.mixture));
}

template <typename T>
SeparationResult FlexioModel<T>::Separate(const Waveform& mixture, std::size_t speakers) const {
  return Separate(mixture, speakers, cfg_.ref_channel);
}

template <typename T>
SeparationResult FlexioModel<T>::Separate(const Waveform& mixture, std::size_t speakers,
                                          std::size_t ref_channel) const {
  mixture.Validate();
  if (ref_channel >= mixture.channels) {
    throw ConfigError("reference channel out of range: " + std::to_string(ref_channel) +
                      " >= " + std::to_string(mixture.channels) + " channels");
  }
  if (speakers < 1) throw InvalidInput("at least one prompt is required (N >= 1)");
  NoGradGuard no_grad;
  const ComplexSpec spec = Stft(mixture, cfg_.stft);
  const Tensor<T> planes = SpecToPlanes<T>(std::span<const ComplexSpec>(&spec, 1));
  Var<T> masks = ForwardMasks(planes, mixture.channels, speakers, ref_channel);
  const ComplexSpec ref = spec.Channel(ref_channel);
  Var<T> wave = MaskedIstft(masks, std::span<const ComplexSpec>(&ref, 1), speakers, cfg_.stft,
                            mixture.length);

  SeparationResult result;
  result.sources = Waveform::Zeros(speakers, mixture.length);
  for (std::size_t i = 0; i < result.sources.samples.size(); ++i) {
    result.sources.samples[i] = static_cast<double>(wave.value()[i]);
  }
  result.masks = ref;
  result.masks.channels = speakers;
  result.masks.values.resize(speakers * ref.frames * ref.bins);
  const auto& mv = masks.value();
  for (std::size_t i = 0; i < result.masks.values.size(); ++i) {
    result.masks.values[i] = {static_cast<double>(mv[2 * i]), static_cast<double>(mv[2 * i + 1])};
  }
  return result;
}

template <typename T>
Tensor<T> SpecToPlanes(std::span<const ComplexSpec> scenes) {
  if (scenes.empty()) throw InvalidInput("no spectrograms given");
  const std::size_t frames = scenes[0].frames, bins = scenes[0].bins;
  std::size_t batch = 0;
  for (const auto& s : scenes) {
    if (s.frames != frames || s.bins != bins || s.channels != scenes[0].channels) {
      throw InvalidInput("spectrograms in one batch must share channels, frames and bins");
    }
    batch += s.channels;
  }
  Tensor<T> out({batch, frames, bins, 2});
  std::size_t o = 0;
  for (const auto& s : scenes) {
    for (const auto& v : s.values) {
      out[o++] = static_cast<T>(v.real());
      out[o++] = static_cast<T>(v.imag());
    }
  }
  return out;
}

template <typename T>
Var<T> MaskedIstft(const Var<T>& masks, std::span<const ComplexSpec> mixtures,
                   std::size_t speakers, const StftConfig& cfg, std::size_t out_len) {
  const auto& ms = masks.shape();
  if (ms.size() != 4 || ms[3] != 2 || ms[0] != mixtures.size() * speakers) {
    throw InvalidInput("MaskedIstft: masks " + ShapeString(ms) + " inconsistent with " +
                       std::to_string(mixtures.size()) + " scenes x " + std::to_string(speakers) +
                       " speakers");
  }
  const std::size_t frames = ms[1], bins = ms[2];
  for (const auto& m : mixtures) {
    if (m.channels != 1 || m.frames != frames || m.bins != bins) {
      throw InvalidInput("MaskedIstft: mixture spectrogram does not match the masks");
    }
  }
  const std::size_t tf = frames * bins;
  std::vector<ComplexSpec> mix(mixtures.begin(), mixtures.end());
  Tensor<T> out({ms[0], out_len});
  const auto& mv = masks.value();
  for (std::size_t s = 0; s < mix.size(); ++s) {
    ComplexSpec est = mix[s];
    est.channels = speakers;
    est.values.resize(speakers * tf);
    for (std::size_t n = 0; n < speakers; ++n) {
      for (std::size_t i = 0; i < tf; ++i) {
        const std::size_t mi = ((s * speakers + n) * tf + i) * 2;
        const std::complex<double> m(static_cast<double>(mv[mi]), static_cast<double>(mv[mi + 1]));
        est.values[n * tf + i] = m * mix[s].values[i];
      }
    }
    const Waveform w = Istft(est, cfg, out_len);
    for (std::size_t i = 0; i < w.samples.size(); ++i) {
      out[s * speakers * out_len + i] = static_cast<T>(w.samples[i]);
    }
  }
  return MakeResult<T>(std::move(out), {masks}, [mix = std::move(mix), speakers, cfg, out_len, tf](Node<T>& n) {
    Node<T>* p = n.parents[0].get();
    if (p == nullptr || !p->requires_grad) return;
    T* dm = p->grad_buffer().data();
    for (std::size_t s = 0; s < mix.size(); ++s) {
      Waveform g = Waveform::Zeros(speakers, out_len);
      for (std::size_t i = 0; i < g.samples.size(); ++i) {
        g.samples[i] = static_cast<double>(n.grad[s * speakers * out_len + i]);
      }
      const ComplexSpec gs = IstftAdjoint(g, cfg);
      for (std::size_t k = 0; k < speakers; ++k) {
        for (std::size_t i = 0; i < tf; ++i) {
          // d/d(mask) of mask * X is G * conj(X) in (re, im) form.
          const std::complex<double> v = gs.values[k * tf + i] * std::conj(mix[s].values[i]);
          const std::size_t mi = ((s * speakers + k) * tf + i) * 2;
          dm[mi] += static_cast<T>(v.real());
          dm[mi + 1] += static_cast<T>(v.imag());
        }
      }
    }
  });
}

template class FlexioModel<float>;
template class FlexioModel<double>;
template Tensor<float> SpecToPlanes(std::span<const ComplexSpec>);
template Tensor<double> SpecToPlanes(std::span<const ComplexSpec>);
template Var<float> MaskedIstft(const Var<float>&, std::span<const ComplexSpec>, std::size_t,
                                const StftConfig&, std::size_t);
template Var<double> MaskedIstft(const Var<double>&, std::span<const ComplexSpec>, std::size_t,
                                 const StftConfig&, std::size_t);

}  // namespace flexio
