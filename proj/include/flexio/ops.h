#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "flexio/autograd.h"

namespace flexio::ops {

// Elementwise arithmetic on equal shapes.
template <typename T> Var<T> Add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> Mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> Scale(const Var<T>& a, T factor);

// y = x W + b over the last dimension. `w` is [in, out]; `b` may be undefined.
template <typename T> Var<T> Linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

// One tap of a convolution on the (time, freq) grid of a [B, T, F, C] map.
struct ConvTap {
  int dt = 0;
  int df = 0;
};

// y[b,t,f] = bias + sum_k x[b, t+dt_k, f+df_k] W_k, zero outside the grid.
// `w` is [Cin, K * Cout] with tap k occupying columns [k*Cout, (k+1)*Cout).
// 1D convolutions along either axis and small 2D kernels are all expressed
// through their tap lists.
template <typename T>
Var<T> ShiftedConv(const Var<T>& x, const Var<T>& w, const Var<T>& b,
                   std::span<const ConvTap> taps);

// Same-length 1D convolution taps along one axis (left pad (K-1)/2).
std::vector<ConvTap> ConvTaps1d(int kernel, bool along_time);
// Taps of a stride-1 transposed convolution with the same length contract.
std::vector<ConvTap> DeconvTaps1d(int kernel, bool along_time);
// Square 2D kernel with centred taps (kernel odd).
std::vector<ConvTap> ConvTaps2d(int kernel);

// [..., 2C] -> [..., C]: silu(first half) * second half.
template <typename T> Var<T> SwiGlu(const Var<T>& x);

// Parametric ReLU with a single learned slope ([1]).
template <typename T> Var<T> PRelu(const Var<T>& x, const Var<T>& slope);

// Per position, channels split into `groups`; each group divided by
// sqrt(mean(x^2) + eps) then scaled/shifted per channel.
template <typename T>
Var<T> RmsGroupNorm(const Var<T>& x, std::size_t groups, const Var<T>& scale,
                    const Var<T>& bias, T eps);

// Normalises each batch entry over all of its (time, freq, channel) values.
template <typename T>
Var<T> GlobalLayerNorm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps);

enum class SeqAxis { kTime, kFreq, kChannel };

// Describes how a [B, T, F, 3*H*Dh] projection is cut into attention
// sequences.
//  kTime / kFreq: one sequence per (b, freq) or (b, time). With
//    `shared_weights`, the `group` consecutive batch entries forming one
//    scene share a single weight matrix built from their summed logits.
//  kChannel: one sequence of length `group` per (scene, time, freq).
struct AttentionLayout {
  SeqAxis axis = SeqAxis::kTime;
  std::size_t group = 1;
  bool shared_weights = false;
  bool rope = true;
};

// Multi-head softmax attention. Input packs [Q | K | V] along the last
// dimension, each H*Dh wide; output is the concatenated heads [.., H*Dh].
template <typename T>
Var<T> Attention(const Var<T>& qkv, std::size_t heads, std::size_t head_dim,
                 const AttentionLayout& layout);

// [S*G, ...] -> [S, ...] mean over consecutive groups, and its transpose.
template <typename T> Var<T> GroupMean(const Var<T>& x, std::size_t group);
template <typename T> Var<T> GroupBroadcast(const Var<T>& x, std::size_t group);

template <typename T> Var<T> ConcatLast(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> ConcatTime(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> SliceTime(const Var<T>& x, std::size_t start, std::size_t len);

// p [C] -> [batch, frames, freq, C].
template <typename T>
Var<T> BroadcastPrompt(const Var<T>& p, std::size_t batch, std::size_t frames, std::size_t freq);

// Concatenates equally shaped tensors along the leading (batch) dimension.
template <typename T> Var<T> ConcatBatch(std::span<const Var<T>> xs);

// Selects batch entries (rows of the leading dimension).
template <typename T>
Var<T> GatherBatch(const Var<T>& x, std::span<const std::size_t> indices);

// prompts [S, N, F, C] and mixture [S, T, F, C] -> [S*N, T, F, C], the
// prompt state broadcast along time and multiplied elementwise.
template <typename T> Var<T> PromptGate(const Var<T>& prompts, const Var<T>& mix);

// Rotates consecutive feature pairs of each row by position * 10000^(-2i/Dh),
// the row index being the position. `inverse` applies the transpose.
template <typename T> void ApplyRope(RowMatrix<T>& x, bool inverse);

// softmax(sum_m Q_m K_m^T / sqrt(Dh * M)) for M query/key pairs of shape
// [L, Dh]. With one pair this is plain scaled dot-product attention weights.
template <typename T>
RowMatrix<T> SharedAttentionWeights(std::span<const RowMatrix<T>> queries,
                                    std::span<const RowMatrix<T>> keys);

// Scalar sum(x * w); used to build probe losses.
template <typename T> Var<T> WeightedSum(const Var<T>& x, const Tensor<T>& w);

}  // namespace flexio::ops
