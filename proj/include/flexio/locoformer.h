#pragma once

#include <optional>
#include <string>

#include "flexio/ops.h"
#include "flexio/params.h"

namespace flexio {

struct BlockConfig {
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t head_dim = 16;
  int conv_kernel = 4;
  int conv_stride = 1;
  std::size_t ffn_expansion = 4;
  bool omit_pre_mhsa_ffn = false;
  std::size_t norm_groups = 4;
  double eps = 1e-5;

  void Validate() const;
};

enum class Axis { kTime, kFreq };

template <typename T>
struct RmsNormParams {
  Var<T> scale;
  Var<T> bias;
};

// Norm -> Conv1D (D -> 2*hidden) -> Swish gate -> Deconv1D (hidden -> D).
template <typename T>
struct ConvSwiGluParams {
  RmsNormParams<T> norm;
  Var<T> conv_w, conv_b;
  Var<T> deconv_w, deconv_b;
};

// Packed Q/K/V projection followed by the head-merging projection.
template <typename T>
struct MhsaParams {
  RmsNormParams<T> norm;
  Var<T> qkv_w, qkv_b;
  Var<T> out_w, out_b;
};

template <typename T>
struct StageParams {
  std::optional<ConvSwiGluParams<T>> ffn_pre;
  MhsaParams<T> mhsa;
  ConvSwiGluParams<T> ffn_post;
};

template <typename T>
struct LocoformerParams {
  StageParams<T> time;
  StageParams<T> freq;
};

template <typename T>
RmsNormParams<T> CreateRmsNorm(ParameterStore<T>& store, const std::string& prefix, std::size_t dim);
template <typename T>
ConvSwiGluParams<T> CreateConvSwiGlu(ParameterStore<T>& store, const std::string& prefix,
                                     const BlockConfig& cfg, Initializer<T>& init);
template <typename T>
MhsaParams<T> CreateMhsa(ParameterStore<T>& store, const std::string& prefix, std::size_t dim,
                         std::size_t heads, std::size_t head_dim, Initializer<T>& init);
template <typename T>
LocoformerParams<T> CreateLocoformer(ParameterStore<T>& store, const std::string& prefix,
                                     const BlockConfig& cfg, Initializer<T>& init);

template <typename T>
Var<T> ApplyRmsNorm(const Var<T>& x, const RmsNormParams<T>& p, const BlockConfig& cfg);

// Residual branch only; the caller adds the input back.
template <typename T>
Var<T> ConvSwiGlu(const Var<T>& x, Axis axis, const ConvSwiGluParams<T>& p, const BlockConfig& cfg);

// Multi-head self-attention along `axis` with rotary positions, applied to an
// already-normalised input. `coattention_group` > 1 shares the attention
// weights across that many consecutive batch entries (channels of a scene).
template <typename T>
Var<T> RopeMhsa(const Var<T>& x, Axis axis, const MhsaParams<T>& p, std::size_t heads,
                std::size_t head_dim, std::size_t coattention_group = 1, bool rope = true);

// Temporal stage then frequency stage on a [B, T, F, D] map; shape preserved.
template <typename T>
Var<T> LocoformerBlock(const Var<T>& x, const LocoformerParams<T>& p, const BlockConfig& cfg,
                       std::size_t coattention_group = 1);

}  // namespace flexio
