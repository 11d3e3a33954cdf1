#include "flexio/channel_comm.h"

namespace flexio {

CommMechanism ParseCommMechanism(const std::string& name) {
  if (name == "none") return CommMechanism::kNone;
  if (name == "tac") return CommMechanism::kTac;
  if (name == "cross_channel_attention") return CommMechanism::kCrossChannelAttention;
  if (name == "co_attention") return CommMechanism::kCoAttention;
  throw ConfigError("unknown channel communication mechanism: " + name);
}

std::string CommMechanismName(CommMechanism c) {
  switch (c) {
    case CommMechanism::kNone:
      return "none";
    case CommMechanism::kTac:
      return "tac";
    case CommMechanism::kCrossChannelAttention:
      return "cross_channel_attention";
    case CommMechanism::kCoAttention:
      return "co_attention";
  }
  return "unknown";
}

template <typename T>
TacParams<T> CreateTac(ParameterStore<T>& store, const std::string& prefix, std::size_t dim,
                       std::size_t hidden, Initializer<T>& init) {
  TacParams<T> p;
  p.in_w = store.Add(prefix + ".in.weight", init.FanIn({dim, hidden}, dim));
  p.in_b = store.Add(prefix + ".in.bias", init.FanIn({hidden}, dim));
  p.in_slope = store.Add(prefix + ".in.prelu", Initializer<T>::Constant({1}, T(0.25)));
  p.avg_w = store.Add(prefix + ".avg.weight", init.FanIn({hidden, hidden}, hidden));
  p.avg_b = store.Add(prefix + ".avg.bias", init.FanIn({hidden}, hidden));
  p.avg_slope = store.Add(prefix + ".avg.prelu", Initializer<T>::Constant({1}, T(0.25)));
  p.cat_w = store.Add(prefix + ".cat.weight", init.FanIn({2 * hidden, dim}, 2 * hidden));
  p.cat_b = store.Add(prefix + ".cat.bias", init.FanIn({dim}, 2 * hidden));
  p.norm = CreateRmsNorm(store, prefix + ".norm", dim);
  return p;
}

template <typename T>
ChAttParams<T> CreateChAtt(ParameterStore<T>& store, const std::string& prefix, std::size_t dim,
                           std::size_t heads, std::size_t head_dim, Initializer<T>& init) {
  const std::size_t inner = heads * head_dim;
  ChAttParams<T> p;
  p.norm = CreateRmsNorm(store, prefix + ".norm", dim);
  p.qkv_w = store.Add(prefix + ".qkv.weight", init.FanIn({dim, 3 * inner}, dim));
  p.qkv_b = store.Add(prefix + ".qkv.bias", init.FanIn({3 * inner}, dim));
  p.out_w = store.Add(prefix + ".out.weight", init.FanIn({inner, dim}, inner));
  p.out_b = store.Add(prefix + ".out.bias", init.FanIn({dim}, inner));
  return p;
}

template <typename T>
Var<T> Tac(const Var<T>& x, std::size_t channels, const TacParams<T>& p, const BlockConfig& cfg) {
  if (channels == 0 || x.shape().size() != 4 || x.dim(0) % channels != 0) {
    throw InvalidInput("TAC: batch is not a whole number of " + std::to_string(channels) + "-channel scenes");
  }
  Var<T> w = ops::PRelu(ops::Linear(x, p.in_w, p.in_b), p.in_slope);
  Var<T> pooled = ops::GroupMean(w, channels);
  Var<T> global = ops::PRelu(ops::Linear(pooled, p.avg_w, p.avg_b), p.avg_slope);
  Var<T> cat = ops::ConcatLast(w, ops::GroupBroadcast(global, channels));
  Var<T> proj = ops::Linear(cat, p.cat_w, p.cat_b);
  return ops::Add(x, ApplyRmsNorm(proj, p.norm, cfg));
}

template <typename T>
Var<T> CrossChannelAttention(const Var<T>& x, std::size_t channels, const ChAttParams<T>& p,
                             std::size_t heads, std::size_t head_dim, const BlockConfig& cfg) {
  if (channels == 0 || x.shape().size() != 4 || x.dim(0) % channels != 0) {
    throw InvalidInput("cross-channel attention: batch is not a whole number of scenes");
  }
  ops::AttentionLayout layout;
  layout.axis = ops::SeqAxis::kChannel;
  layout.group = channels;
  layout.rope = false;
  Var<T> normed = ApplyRmsNorm(x, p.norm, cfg);
  Var<T> qkv = ops::Linear(normed, p.qkv_w, p.qkv_b);
  Var<T> att = ops::Attention(qkv, heads, head_dim, layout);
  return ops::Add(x, ops::Linear(att, p.out_w, p.out_b));
}

template <typename T>
Var<T> StackChannels(std::span<const Var<T>> xs) {
  if (xs.empty()) throw InvalidInput("channel list is empty");
  for (std::size_t m = 1; m < xs.size(); ++m) {
    if (xs[m].shape() != xs[0].shape()) {
      throw InvalidInput("channel " + std::to_string(m) + " has shape " + ShapeString(xs[m].shape()) +
                         ", expected " + ShapeString(xs[0].shape()));
    }
  }
  return ops::ConcatBatch(xs);
}

template <typename T>
std::vector<Var<T>> UnstackChannels(const Var<T>& x, std::size_t channels) {
  const std::size_t per = x.dim(0) / channels;
  std::vector<Var<T>> out;
  for (std::size_t m = 0; m < channels; ++m) {
    std::vector<std::size_t> idx(per);
    for (std::size_t i = 0; i < per; ++i) idx[i] = m * per + i;
    out.push_back(ops::GatherBatch(x, std::span<const std::size_t>(idx)));
  }
  return out;
}

namespace {

// A list of M maps, each [S, T, F, D], is interleaved to the scene-major
// [S*M, T, F, D] layout the kernels expect.
template <typename T>
Var<T> InterleaveChannels(std::span<const Var<T>> xs) {
  Var<T> stacked = StackChannels(xs);  // [M*S, ...], channel-major
  const std::size_t m = xs.size();
  const std::size_t s = xs[0].dim(0);
  std::vector<std::size_t> idx;
  for (std::size_t si = 0; si < s; ++si) {
    for (std::size_t mi = 0; mi < m; ++mi) idx.push_back(mi * s + si);
  }
  return ops::GatherBatch(stacked, std::span<const std::size_t>(idx));
}

template <typename T>
std::vector<Var<T>> DeinterleaveChannels(const Var<T>& x, std::size_t m) {
  const std::size_t s = x.dim(0) / m;
  std::vector<Var<T>> out;
  for (std::size_t mi = 0; mi < m; ++mi) {
    std::vector<std::size_t> idx;
    for (std::size_t si = 0; si < s; ++si) idx.push_back(si * m + mi);
    out.push_back(ops::GatherBatch(x, std::span<const std::size_t>(idx)));
  }
  return out;
}

}  // namespace

template <typename T>
std::vector<Var<T>> Tac(std::span<const Var<T>> xs, const TacParams<T>& p, const BlockConfig& cfg) {
  Var<T> x = InterleaveChannels(xs);
  return DeinterleaveChannels(Tac(x, xs.size(), p, cfg), xs.size());
}

template <typename T>
std::vector<Var<T>> CrossChannelAttention(std::span<const Var<T>> xs, const ChAttParams<T>& p,
                                          std::size_t heads, std::size_t head_dim,
                                          const BlockConfig& cfg) {
  Var<T> x = InterleaveChannels(xs);
  return DeinterleaveChannels(CrossChannelAttention(x, xs.size(), p, heads, head_dim, cfg), xs.size());
}

template <typename T>
RowMatrix<T> CoAttentionWeights(std::span<const RowMatrix<T>> queries,
                                std::span<const RowMatrix<T>> keys) {
  if (queries.empty()) throw InvalidInput("co-attention needs at least one channel (M = 0)");
  return ops::SharedAttentionWeights(queries, keys);
}

#define FLEXIO_INSTANTIATE_COMM(T)                                                               \
  template TacParams<T> CreateTac(ParameterStore<T>&, const std::string&, std::size_t,          \
                                  std::size_t, Initializer<T>&);                                \
  template ChAttParams<T> CreateChAtt(ParameterStore<T>&, const std::string&, std::size_t,      \
                                      std::size_t, std::size_t, Initializer<T>&);               \
  template Var<T> Tac(const Var<T>&, std::size_t, const TacParams<T>&, const BlockConfig&);     \
  template Var<T> CrossChannelAttention(const Var<T>&, std::size_t, const ChAttParams<T>&,      \
                                        std::size_t, std::size_t, const BlockConfig&);          \
  template std::vector<Var<T>> Tac(std::span<const Var<T>>, const TacParams<T>&,                \
                                   const BlockConfig&);                                         \
  template std::vector<Var<T>> CrossChannelAttention(std::span<const Var<T>>,                   \
                                                     const ChAttParams<T>&, std::size_t,        \
                                                     std::size_t, const BlockConfig&);          \
  template RowMatrix<T> CoAttentionWeights(std::span<const RowMatrix<T>>,                       \
                                           std::span<const RowMatrix<T>>);                      \
  template Var<T> StackChannels(std::span<const Var<T>>);                                       \
  template std::vector<Var<T>> UnstackChannels(const Var<T>&, std::size_t);

FLEXIO_INSTANTIATE_COMM(float)
FLEXIO_INSTANTIATE_COMM(double)

}  // namespace flexio
