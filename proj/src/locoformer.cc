#include "flexio/locoformer.h"

namespace flexio {

void BlockConfig::Validate() const {
  if (dim == 0 || heads == 0 || head_dim == 0) throw ConfigError("block dimensions must be positive");
  if (conv_kernel < 1) throw ConfigError("conv_kernel must be >= 1");
  if (conv_stride != 1) throw ConfigError("only conv_stride = 1 keeps the block shape-preserving");
  if (ffn_expansion == 0) throw ConfigError("ffn_expansion must be positive");
  if (norm_groups == 0 || dim % norm_groups != 0) {
    throw ConfigError("dim " + std::to_string(dim) + " not divisible by norm_groups " +
                      std::to_string(norm_groups));
  }
  if (head_dim % 2 != 0) throw ConfigError("head_dim must be even for rotary encoding");
}

template <typename T>
RmsNormParams<T> CreateRmsNorm(ParameterStore<T>& store, const std::string& prefix, std::size_t dim) {
  return {store.Add(prefix + ".scale", Initializer<T>::Constant({dim}, T(1))),
          store.Add(prefix + ".bias", Initializer<T>::Constant({dim}, T(0)))};
}

template <typename T>
ConvSwiGluParams<T> CreateConvSwiGlu(ParameterStore<T>& store, const std::string& prefix,
                                     const BlockConfig& cfg, Initializer<T>& init) {
  const std::size_t hidden = cfg.ffn_expansion * cfg.dim;
  const auto k = static_cast<std::size_t>(cfg.conv_kernel);
  ConvSwiGluParams<T> p;
  p.norm = CreateRmsNorm(store, prefix + ".norm", cfg.dim);
  p.conv_w = store.Add(prefix + ".conv.weight", init.FanIn({cfg.dim, k * 2 * hidden}, cfg.dim * k));
  p.conv_b = store.Add(prefix + ".conv.bias", init.FanIn({2 * hidden}, cfg.dim * k));
  p.deconv_w = store.Add(prefix + ".deconv.weight", init.FanIn({hidden, k * cfg.dim}, hidden * k));
  p.deconv_b = store.Add(prefix + ".deconv.bias", init.FanIn({cfg.dim}, hidden * k));
  return p;
}

template <typename T>
MhsaParams<T> CreateMhsa(ParameterStore<T>& store, const std::string& prefix, std::size_t dim,
                         std::size_t heads, std::size_t head_dim, Initializer<T>& init) {
  const std::size_t inner = heads * head_dim;
  MhsaParams<T> p;
  p.norm = CreateRmsNorm(store, prefix + ".norm", dim);
  p.qkv_w = store.Add(prefix + ".qkv.weight", init.FanIn({dim, 3 * inner}, dim));
  p.qkv_b = store.Add(prefix + ".qkv.bias", init.FanIn({3 * inner}, dim));
  p.out_w = store.Add(prefix + ".out.weight", init.FanIn({inner, dim}, inner));
  p.out_b = store.Add(prefix + ".out.bias", init.FanIn({dim}, inner));
  return p;
}

template <typename T>
LocoformerParams<T> CreateLocoformer(ParameterStore<T>& store, const std::string& prefix,
                                     const BlockConfig& cfg, Initializer<T>& init) {
  cfg.Validate();
  auto stage = [&](const std::string& name) {
    StageParams<T> s;
    if (!cfg.omit_pre_mhsa_ffn) s.ffn_pre = CreateConvSwiGlu(store, name + ".ffn_pre", cfg, init);
    s.mhsa = CreateMhsa(store, name + ".mhsa", cfg.dim, cfg.heads, cfg.head_dim, init);
    s.ffn_post = CreateConvSwiGlu(store, name + ".ffn_post", cfg, init);
    return s;
  };
  LocoformerParams<T> p;
  p.time = stage(prefix + ".time");
  p.freq = stage(prefix + ".freq");
  return p;
}

template <typename T>
Var<T> ApplyRmsNorm(const Var<T>& x, const RmsNormParams<T>& p, const BlockConfig& cfg) {
  return ops::RmsGroupNorm(x, cfg.norm_groups, p.scale, p.bias, static_cast<T>(cfg.eps));
}

template <typename T>
Var<T> ConvSwiGlu(const Var<T>& x, Axis axis, const ConvSwiGluParams<T>& p, const BlockConfig& cfg) {
  const bool time = axis == Axis::kTime;
  const auto conv_taps = ops::ConvTaps1d(cfg.conv_kernel, time);
  const auto deconv_taps = ops::DeconvTaps1d(cfg.conv_kernel, time);
  Var<T> h = ApplyRmsNorm(x, p.norm, cfg);
  h = ops::ShiftedConv(h, p.conv_w, p.conv_b, std::span<const ops::ConvTap>(conv_taps));
  h = ops::SwiGlu(h);
  return ops::ShiftedConv(h, p.deconv_w, p.deconv_b, std::span<const ops::ConvTap>(deconv_taps));
}

template <typename T>
Var<T> RopeMhsa(const Var<T>& x, Axis axis, const MhsaParams<T>& p, std::size_t heads,
                std::size_t head_dim, std::size_t coattention_group, bool rope) {
  ops::AttentionLayout layout;
  layout.axis = axis == Axis::kTime ? ops::SeqAxis::kTime : ops::SeqAxis::kFreq;
  layout.group = coattention_group;
  layout.shared_weights = coattention_group > 1;
  layout.rope = rope;
  Var<T> qkv = ops::Linear(x, p.qkv_w, p.qkv_b);
  Var<T> heads_out = ops::Attention(qkv, heads, head_dim, layout);
  return ops::Linear(heads_out, p.out_w, p.out_b);
}

namespace {

template <typename T>
Var<T> Stage(Var<T> x, Axis axis, const StageParams<T>& p, const BlockConfig& cfg,
             std::size_t coattention_group) {
  if (p.ffn_pre) x = ops::Add(x, ConvSwiGlu(x, axis, *p.ffn_pre, cfg));
  Var<T> normed = ApplyRmsNorm(x, p.mhsa.norm, cfg);
  x = ops::Add(x, RopeMhsa(normed, axis, p.mhsa, cfg.heads, cfg.head_dim, coattention_group));
  return ops::Add(x, ConvSwiGlu(x, axis, p.ffn_post, cfg));
}

}  // namespace

template <typename T>
Var<T> LocoformerBlock(const Var<T>& x, const LocoformerParams<T>& p, const BlockConfig& cfg,
                       std::size_t coattention_group) {
  Var<T> y = Stage(x, Axis::kTime, p.time, cfg, coattention_group);
  return Stage(y, Axis::kFreq, p.freq, cfg, coattention_group);
}

#define FLEXIO_INSTANTIATE_LOCOFORMER(T)                                                        \
  template RmsNormParams<T> CreateRmsNorm(ParameterStore<T>&, const std::string&, std::size_t); \
  template ConvSwiGluParams<T> CreateConvSwiGlu(ParameterStore<T>&, const std::string&,         \
                                                const BlockConfig&, Initializer<T>&);           \
  template MhsaParams<T> CreateMhsa(ParameterStore<T>&, const std::string&, std::size_t,        \
                                    std::size_t, std::size_t, Initializer<T>&);                 \
  template LocoformerParams<T> CreateLocoformer(ParameterStore<T>&, const std::string&,         \
                                                const BlockConfig&, Initializer<T>&);           \
  template Var<T> ApplyRmsNorm(const Var<T>&, const RmsNormParams<T>&, const BlockConfig&);     \
  template Var<T> ConvSwiGlu(const Var<T>&, Axis, const ConvSwiGluParams<T>&, const BlockConfig&); \
  template Var<T> RopeMhsa(const Var<T>&, Axis, const MhsaParams<T>&, std::size_t, std::size_t, \
                           std::size_t, bool);                                                  \
  template Var<T> LocoformerBlock(const Var<T>&, const LocoformerParams<T>&, const BlockConfig&, \
                                  std::size_t);

FLEXIO_INSTANTIATE_LOCOFORMER(float)
FLEXIO_INSTANTIATE_LOCOFORMER(double)

}  // namespace flexio
