#pragma once

#include <span>
#include <string>
#include <vector>

#include "flexio/locoformer.h"

namespace flexio {

enum class CommMechanism { kNone, kTac, kCrossChannelAttention, kCoAttention };

CommMechanism ParseCommMechanism(const std::string& name);
std::string CommMechanismName(CommMechanism c);

// Transform-average-concatenate. All layers act per TF bin; none of the
// shapes depend on the channel count.
template <typename T>
struct TacParams {
  Var<T> in_w, in_b, in_slope;
  Var<T> avg_w, avg_b, avg_slope;
  Var<T> cat_w, cat_b;
  RmsNormParams<T> norm;
};

// Self-attention over the microphone axis (no positional encoding).
template <typename T>
struct ChAttParams {
  RmsNormParams<T> norm;
  Var<T> qkv_w, qkv_b;
  Var<T> out_w, out_b;
};

template <typename T>
TacParams<T> CreateTac(ParameterStore<T>& store, const std::string& prefix, std::size_t dim,
                       std::size_t hidden, Initializer<T>& init);
template <typename T>
ChAttParams<T> CreateChAtt(ParameterStore<T>& store, const std::string& prefix, std::size_t dim,
                           std::size_t heads, std::size_t head_dim, Initializer<T>& init);

// x is [S*M, T, F, D] with the M channels of each scene adjacent.
// W_m = PReLU(FC_in x_m); W_avg = PReLU(FC_avg mean_m W_m);
// y_m = x_m + Norm(FC_cat [W_m; W_avg]).
template <typename T>
Var<T> Tac(const Var<T>& x, std::size_t channels, const TacParams<T>& p, const BlockConfig& cfg);

// y = x + FC_out(MHSA over the channel axis of Norm(x)), at every (t, f).
template <typename T>
Var<T> CrossChannelAttention(const Var<T>& x, std::size_t channels, const ChAttParams<T>& p,
                             std::size_t heads, std::size_t head_dim, const BlockConfig& cfg);

// List-of-channels front ends: M equally shaped maps (throws InvalidInput
// otherwise), each [S, T, F, D]; returns the M updated maps.
template <typename T>
std::vector<Var<T>> Tac(std::span<const Var<T>> xs, const TacParams<T>& p, const BlockConfig& cfg);
template <typename T>
std::vector<Var<T>> CrossChannelAttention(std::span<const Var<T>> xs, const ChAttParams<T>& p,
                                          std::size_t heads, std::size_t head_dim,
                                          const BlockConfig& cfg);

// Channel-invariant co-attention weights for one head:
// softmax(sum_m Q_m K_m^T / sqrt(D_att * M)), shared by every channel.
template <typename T>
RowMatrix<T> CoAttentionWeights(std::span<const RowMatrix<T>> queries,
                                std::span<const RowMatrix<T>> keys);

template <typename T>
Var<T> StackChannels(std::span<const Var<T>> xs);
// Splits a channel-major stack back into `channels` maps.
template <typename T>
std::vector<Var<T>> UnstackChannels(const Var<T>& x, std::size_t channels);

}  // namespace flexio
