#include "flexio/ops.h"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <unordered_map>

namespace flexio::ops {
namespace {

struct Dims4 {
  std::size_t b, t, f, c;
};

Dims4 FeatureDims(const Shape& s, const char* op) {
  if (s.size() != 4) {
    throw InvalidInput(std::string(op) + ": expected [B, T, F, C], got " + ShapeString(s));
  }
  return {s[0], s[1], s[2], s[3]};
}

void RequireSameShape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw InvalidInput(std::string(op) + ": shape mismatch " + ShapeString(a) + " vs " +
                       ShapeString(b));
  }
}

template <typename T>
Node<T>* Parent(Node<T>& n, std::size_t i) {
  auto* p = n.parents[i].get();
  return (p != nullptr && p->requires_grad) ? p : nullptr;
}

template <typename T>
T Sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace

template <typename T>
Var<T> Add(const Var<T>& a, const Var<T>& b) {
  RequireSameShape(a.shape(), b.shape(), "Add");
  Tensor<T> out = a.value();
  out.matrix().array() += b.value().matrix().array();
  return MakeResult<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (auto* p = Parent(n, i)) p->grad_buffer().matrix() += n.grad.matrix();
    }
  });
}

template <typename T>
Var<T> Mul(const Var<T>& a, const Var<T>& b) {
  RequireSameShape(a.shape(), b.shape(), "Mul");
  Tensor<T> out = a.value();
  out.matrix().array() *= b.value().matrix().array();
  return MakeResult<T>(std::move(out), {a, b}, [](Node<T>& n) {
    auto* pa = Parent(n, 0);
    auto* pb = Parent(n, 1);
    if (pa) pa->grad_buffer().matrix().array() += n.grad.matrix().array() * n.parents[1]->value.matrix().array();
    if (pb) pb->grad_buffer().matrix().array() += n.grad.matrix().array() * n.parents[0]->value.matrix().array();
  });
}

template <typename T>
Var<T> Scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  out.matrix() *= factor;
  return MakeResult<T>(std::move(out), {a}, [factor](Node<T>& n) {
    if (auto* p = Parent(n, 0)) p->grad_buffer().matrix() += factor * n.grad.matrix();
  });
}

template <typename T>
Var<T> Linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& xs = x.shape();
  if (w.value().rank() != 2 || xs.empty() || xs.back() != w.dim(0)) {
    throw InvalidInput("Linear: input " + ShapeString(xs) + " incompatible with weight " +
                       ShapeString(w.shape()));
  }
  const std::size_t out_dim = w.dim(1);
  if (b.defined() && b.value().size() != out_dim) {
    throw InvalidInput("Linear: bias size mismatch");
  }
  Shape ys = xs;
  ys.back() = out_dim;
  Tensor<T> out(ys);
  auto y = out.matrix();
  y.noalias() = x.value().matrix() * w.value().matrix();
  if (b.defined()) {
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data(), out_dim);
  }
  return MakeResult<T>(std::move(out), {x, w, b}, [](Node<T>& n) {
    const auto dy = n.grad.matrix();
    const auto& xv = n.parents[0]->value;
    const auto& wv = n.parents[1]->value;
    if (auto* px = Parent(n, 0)) px->grad_buffer().matrix().noalias() += dy * wv.matrix().transpose();
    if (auto* pw = Parent(n, 1)) pw->grad_buffer().matrix().noalias() += xv.matrix().transpose() * dy;
    if (n.parents[2] != nullptr) {
      if (auto* pb = Parent(n, 2)) {
        auto& gb = pb->grad_buffer();
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), gb.size()) += dy.colwise().sum();
      }
    }
  });
}

std::vector<ConvTap> ConvTaps1d(int kernel, bool along_time) {
  std::vector<ConvTap> taps;
  const int left = (kernel - 1) / 2;
  for (int k = 0; k < kernel; ++k) {
    const int s = k - left;
    taps.push_back(along_time ? ConvTap{s, 0} : ConvTap{0, s});
  }
  return taps;
}

std::vector<ConvTap> DeconvTaps1d(int kernel, bool along_time) {
  // A transposed convolution scatters x[t] to y[t + k - pad], so tap k reads
  // x[t + pad - k].
  std::vector<ConvTap> taps;
  const int pad = (kernel - 1) / 2;
  for (int k = 0; k < kernel; ++k) {
    const int s = pad - k;
    taps.push_back(along_time ? ConvTap{s, 0} : ConvTap{0, s});
  }
  return taps;
}

std::vector<ConvTap> ConvTaps2d(int kernel) {
  if (kernel % 2 == 0) throw ConfigError("2D kernel must be odd for centred taps");
  std::vector<ConvTap> taps;
  const int half = kernel / 2;
  for (int dt = -half; dt <= half; ++dt) {
    for (int df = -half; df <= half; ++df) taps.push_back({dt, df});
  }
  return taps;
}

namespace {

// Calls fn(dst_row, src_row, count) for each run of consecutive output rows
// whose shifted sources lie inside the [T, F] grid of one batch entry.
template <typename Fn>
void ForEachTapRun(const Dims4& d, const ConvTap& tap, Fn&& fn) {
  const long T = static_cast<long>(d.t), F = static_cast<long>(d.f);
  const long t0 = std::max(0L, -static_cast<long>(tap.dt));
  const long t1 = std::min(T, T - tap.dt);
  const long f0 = std::max(0L, -static_cast<long>(tap.df));
  const long f1 = std::min(F, F - tap.df);
  if (t1 <= t0 || f1 <= f0) return;
  const long shift = tap.dt * F + tap.df;
  if (f0 == 0 && f1 == F) {
    fn(t0 * F, t0 * F + shift, (t1 - t0) * F);
    return;
  }
  for (long t = t0; t < t1; ++t) fn(t * F + f0, t * F + f0 + shift, f1 - f0);
}

}  // namespace

template <typename T>
Var<T> ShiftedConv(const Var<T>& x, const Var<T>& w, const Var<T>& b,
                   std::span<const ConvTap> taps) {
  const Dims4 d = FeatureDims(x.shape(), "ShiftedConv");
  const std::size_t k_taps = taps.size();
  if (w.value().rank() != 2 || w.dim(0) != d.c || k_taps == 0 || w.dim(1) % k_taps != 0) {
    throw InvalidInput("ShiftedConv: weight " + ShapeString(w.shape()) +
                       " incompatible with input " + ShapeString(x.shape()));
  }
  const auto cout = static_cast<Eigen::Index>(w.dim(1) / k_taps);
  const auto cin = static_cast<Eigen::Index>(d.c);
  std::vector<ConvTap> tap_list(taps.begin(), taps.end());
  Tensor<T> out({d.b, d.t, d.f, static_cast<std::size_t>(cout)});
  const auto rows = static_cast<Eigen::Index>(d.t * d.f);
  const auto wm = w.value().matrix();
  for (std::size_t bi = 0; bi < d.b; ++bi) {
    ConstMatrixMap<T> xb(x.value().data() + bi * rows * cin, rows, cin);
    MatrixMap<T> yb(out.data() + bi * rows * cout, rows, cout);
    if (b.defined()) {
      yb.rowwise() = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data(), cout);
    }
    for (std::size_t k = 0; k < k_taps; ++k) {
      const auto wk = wm.middleCols(static_cast<Eigen::Index>(k) * cout, cout);
      ForEachTapRun(d, tap_list[k], [&](long dst, long src, long n) {
        yb.middleRows(dst, n).noalias() += xb.middleRows(src, n) * wk;
      });
    }
  }
  return MakeResult<T>(std::move(out), {x, w, b}, [d, cin, cout, tap_list](Node<T>& n) {
    const auto rows = static_cast<Eigen::Index>(d.t * d.f);
    const auto& xv = n.parents[0]->value;
    const auto wm = n.parents[1]->value.matrix();
    auto* px = Parent(n, 0);
    auto* pw = Parent(n, 1);
    Node<T>* pb = n.parents[2] ? Parent(n, 2) : nullptr;
    for (std::size_t bi = 0; bi < d.b; ++bi) {
      ConstMatrixMap<T> dyb(n.grad.data() + bi * rows * cout, rows, cout);
      ConstMatrixMap<T> xb(xv.data() + bi * rows * cin, rows, cin);
      for (std::size_t k = 0; k < tap_list.size(); ++k) {
        const auto col = static_cast<Eigen::Index>(k) * cout;
        ForEachTapRun(d, tap_list[k], [&](long dst, long src, long cnt) {
          if (px) {
            MatrixMap<T> dxb(px->grad_buffer().data() + bi * rows * cin, rows, cin);
            dxb.middleRows(src, cnt).noalias() += dyb.middleRows(dst, cnt) * wm.middleCols(col, cout).transpose();
          }
          if (pw) {
            pw->grad_buffer().matrix().middleCols(col, cout).noalias() +=
                xb.middleRows(src, cnt).transpose() * dyb.middleRows(dst, cnt);
          }
        });
      }
      if (pb) {
        auto& gb = pb->grad_buffer();
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), cout) += dyb.colwise().sum();
      }
    }
  });
}

template <typename T>
Var<T> SwiGlu(const Var<T>& x) {
  const auto& xs = x.shape();
  if (xs.empty() || xs.back() % 2 != 0) throw InvalidInput("SwiGlu: last dim must be even");
  const auto c = static_cast<Eigen::Index>(xs.back() / 2);
  const auto rows = static_cast<Eigen::Index>(x.value().size() / xs.back());
  Shape ys = xs;
  ys.back() = static_cast<std::size_t>(c);
  Tensor<T> out(ys);
  const ConstMatrixMap<T> xm(x.value().data(), rows, 2 * c);
  MatrixMap<T> ym(out.data(), rows, c);
  const auto a = xm.leftCols(c).array();
  ym.array() = a / ((-a).exp() + T(1)) * xm.rightCols(c).array();
  return MakeResult<T>(std::move(out), {x}, [rows, c](Node<T>& n) {
    auto* px = Parent(n, 0);
    if (!px) return;
    const ConstMatrixMap<T> xm(n.parents[0]->value.data(), rows, 2 * c);
    MatrixMap<T> dx(px->grad_buffer().data(), rows, 2 * c);
    const ConstMatrixMap<T> dy(n.grad.data(), rows, c);
    const auto a = xm.leftCols(c).array();
    const auto g = xm.rightCols(c).array();
    const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> s = T(1) / ((-a).exp() + T(1));
    dx.leftCols(c).array() += dy.array() * g * (s + a * s * (T(1) - s));
    dx.rightCols(c).array() += dy.array() * a * s;
  });
}

template <typename T>
Var<T> PRelu(const Var<T>& x, const Var<T>& slope) {
  if (slope.value().size() != 1) throw InvalidInput("PRelu: slope must have one element");
  const T a = slope.value()[0];
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v > T(0) ? v : a * v;
  return MakeResult<T>(std::move(out), {x, slope}, [](Node<T>& n) {
    const auto& xv = n.parents[0]->value;
    const T a = n.parents[1]->value[0];
    auto* px = Parent(n, 0);
    auto* ps = Parent(n, 1);
    T ds = 0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const T g = n.grad[i];
      if (xv[i] > T(0)) {
        if (px) px->grad_buffer()[i] += g;
      } else {
        if (px) px->grad_buffer()[i] += a * g;
        ds += g * xv[i];
      }
    }
    if (ps) ps->grad_buffer()[0] += ds;
  });
}

template <typename T>
Var<T> RmsGroupNorm(const Var<T>& x, std::size_t groups, const Var<T>& scale,
                    const Var<T>& bias, T eps) {
  const auto& xs = x.shape();
  const std::size_t c = xs.back();
  if (groups == 0 || c % groups != 0) {
    throw ConfigError("RmsGroupNorm: channels " + std::to_string(c) +
                      " not divisible by groups " + std::to_string(groups));
  }
  if (scale.value().size() != c || bias.value().size() != c) {
    throw InvalidInput("RmsGroupNorm: affine parameter size mismatch");
  }
  const std::size_t gsize = c / groups;
  const std::size_t rows = x.value().size() / c;
  Tensor<T> out(xs);
  // Inverse RMS per (row, group), kept for the backward pass.
  Tensor<T> inv_rms({rows, groups});
  const T* xp = x.value().data();
  const T* sc = scale.value().data();
  const T* bs = bias.value().data();
  T* yp = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t g = 0; g < groups; ++g) {
      const T* xg = xp + r * c + g * gsize;
      T ms = 0;
      for (std::size_t i = 0; i < gsize; ++i) ms += xg[i] * xg[i];
      const T inv = T(1) / std::sqrt(ms / static_cast<T>(gsize) + eps);
      inv_rms[r * groups + g] = inv;
      for (std::size_t i = 0; i < gsize; ++i) {
        const std::size_t ch = g * gsize + i;
        yp[r * c + ch] = xg[i] * inv * sc[ch] + bs[ch];
      }
    }
  }
  return MakeResult<T>(std::move(out), {x, scale, bias},
                       [rows, c, groups, gsize, inv_rms = std::move(inv_rms)](Node<T>& n) {
    const T* xp = n.parents[0]->value.data();
    const T* sc = n.parents[1]->value.data();
    const T* dy = n.grad.data();
    auto* px = Parent(n, 0);
    auto* ps = Parent(n, 1);
    auto* pb = Parent(n, 2);
    std::vector<T> dxhat(gsize);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t g = 0; g < groups; ++g) {
        const T inv = inv_rms[r * groups + g];
        T dot = 0;
        for (std::size_t i = 0; i < gsize; ++i) {
          const std::size_t idx = r * c + g * gsize + i;
          const std::size_t ch = g * gsize + i;
          const T xhat = xp[idx] * inv;
          dxhat[i] = dy[idx] * sc[ch];
          dot += dxhat[i] * xhat;
          if (ps) ps->grad_buffer()[ch] += dy[idx] * xhat;
          if (pb) pb->grad_buffer()[ch] += dy[idx];
        }
        if (px) {
          dot /= static_cast<T>(gsize);
          T* dx = px->grad_buffer().data();
          for (std::size_t i = 0; i < gsize; ++i) {
            const std::size_t idx = r * c + g * gsize + i;
            dx[idx] += (dxhat[i] - xp[idx] * inv * dot) * inv;
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> GlobalLayerNorm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  const auto& xs = x.shape();
  const std::size_t c = xs.back();
  const std::size_t batch = xs.front();
  const std::size_t per = x.value().size() / batch;
  if (gain.value().size() != c || bias.value().size() != c) {
    throw InvalidInput("GlobalLayerNorm: affine parameter size mismatch");
  }
  Tensor<T> out(xs);
  std::vector<T> inv_std(batch), means(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xp = x.value().data() + b * per;
    double sum = 0, sq = 0;
    for (std::size_t i = 0; i < per; ++i) sum += xp[i];
    const double mean = sum / static_cast<double>(per);
    for (std::size_t i = 0; i < per; ++i) sq += (xp[i] - mean) * (xp[i] - mean);
    const T inv = T(1) / std::sqrt(static_cast<T>(sq / static_cast<double>(per)) + eps);
    means[b] = static_cast<T>(mean);
    inv_std[b] = inv;
    T* yp = out.data() + b * per;
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t ch = i % c;
      yp[i] = (xp[i] - means[b]) * inv * gain.value()[ch] + bias.value()[ch];
    }
  }
  return MakeResult<T>(std::move(out), {x, gain, bias},
                       [batch, per, c, inv_std, means](Node<T>& n) {
    const auto& xv = n.parents[0]->value;
    const auto& gv = n.parents[1]->value;
    auto* px = Parent(n, 0);
    auto* pg = Parent(n, 1);
    auto* pb = Parent(n, 2);
    std::vector<T> dxhat(per);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* xp = xv.data() + b * per;
      const T* dy = n.grad.data() + b * per;
      T mean_d = 0, mean_dx = 0;
      for (std::size_t i = 0; i < per; ++i) {
        const std::size_t ch = i % c;
        const T xhat = (xp[i] - means[b]) * inv_std[b];
        dxhat[i] = dy[i] * gv[ch];
        mean_d += dxhat[i];
        mean_dx += dxhat[i] * xhat;
        if (pg) pg->grad_buffer()[ch] += dy[i] * xhat;
        if (pb) pb->grad_buffer()[ch] += dy[i];
      }
      if (!px) continue;
      mean_d /= static_cast<T>(per);
      mean_dx /= static_cast<T>(per);
      T* dx = px->grad_buffer().data() + b * per;
      for (std::size_t i = 0; i < per; ++i) {
        const T xhat = (xp[i] - means[b]) * inv_std[b];
        dx[i] += (dxhat[i] - mean_d - xhat * mean_dx) * inv_std[b];
      }
    }
  });
}

namespace {

struct RopeTable {
  std::vector<double> cos, sin;  // [len, dim/2]
};

const RopeTable& GetRopeTable(std::size_t len, std::size_t dim) {
  static std::mutex mu;
  static std::unordered_map<std::size_t, RopeTable> cache;
  const std::size_t key = len * 4096 + dim;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  RopeTable table;
  const std::size_t half = dim / 2;
  table.cos.resize(len * half);
  table.sin.resize(len * half);
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < half; ++i) {
      const double theta = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      table.cos[pos * half + i] = std::cos(static_cast<double>(pos) * theta);
      table.sin[pos * half + i] = std::sin(static_cast<double>(pos) * theta);
    }
  }
  return cache.emplace(key, std::move(table)).first->second;
}

}  // namespace

template <typename T>
void ApplyRope(RowMatrix<T>& x, bool inverse) {
  const auto len = static_cast<std::size_t>(x.rows());
  const auto dim = static_cast<std::size_t>(x.cols());
  if (dim % 2 != 0) throw ConfigError("rotary encoding needs an even head dimension");
  const RopeTable& table = GetRopeTable(len, dim);
  const std::size_t half = dim / 2;
  const T sign = inverse ? T(-1) : T(1);
  for (std::size_t pos = 0; pos < len; ++pos) {
    T* row = x.data() + pos * dim;
    for (std::size_t i = 0; i < half; ++i) {
      const T cs = static_cast<T>(table.cos[pos * half + i]);
      const T sn = sign * static_cast<T>(table.sin[pos * half + i]);
      const T a = row[2 * i], b = row[2 * i + 1];
      row[2 * i] = a * cs - b * sn;
      row[2 * i + 1] = a * sn + b * cs;
    }
  }
}

namespace {

template <typename T>
void SoftmaxRows(RowMatrix<T>& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    const T mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

}  // namespace

template <typename T>
RowMatrix<T> SharedAttentionWeights(std::span<const RowMatrix<T>> queries,
                                    std::span<const RowMatrix<T>> keys) {
  if (queries.empty() || queries.size() != keys.size()) {
    throw InvalidInput("SharedAttentionWeights: need matching, non-empty query/key lists");
  }
  const auto len = queries[0].rows();
  const auto dim = queries[0].cols();
  RowMatrix<T> logits = RowMatrix<T>::Zero(len, keys[0].rows());
  for (std::size_t m = 0; m < queries.size(); ++m) {
    if (queries[m].rows() != len || queries[m].cols() != dim || keys[m].cols() != dim ||
        keys[m].rows() != keys[0].rows()) {
      throw InvalidInput("SharedAttentionWeights: inconsistent query/key shapes");
    }
    logits.noalias() += queries[m] * keys[m].transpose();
  }
  logits *= T(1) / std::sqrt(static_cast<T>(dim * static_cast<Eigen::Index>(queries.size())));
  SoftmaxRows(logits);
  return logits;
}

namespace {

// A set of attention sequences that share one weight matrix. Member g's
// element i lives at row bases[g] + i * stride of the [rows, cols] matrix.
struct AttentionUnits {
  std::vector<std::vector<std::size_t>> bases;
  std::size_t stride = 0;
  std::size_t len = 0;
};

AttentionUnits BuildUnits(const Dims4& d, const AttentionLayout& layout) {
  AttentionUnits u;
  const std::size_t group = std::max<std::size_t>(layout.group, 1);
  if ((layout.shared_weights || layout.axis == SeqAxis::kChannel) && d.b % group != 0) {
    throw InvalidInput("Attention: batch " + std::to_string(d.b) +
                       " not divisible by channel group " + std::to_string(group));
  }
  const std::size_t tf = d.t * d.f;
  switch (layout.axis) {
    case SeqAxis::kTime:
    case SeqAxis::kFreq: {
      const bool time = layout.axis == SeqAxis::kTime;
      u.stride = time ? d.f : 1;
      u.len = time ? d.t : d.f;
      const std::size_t per_b = time ? d.f : d.t;
      const std::size_t members = layout.shared_weights ? group : 1;
      for (std::size_t b0 = 0; b0 < d.b; b0 += members) {
        for (std::size_t j = 0; j < per_b; ++j) {
          std::vector<std::size_t> bases;
          for (std::size_t g = 0; g < members; ++g) {
            bases.push_back((b0 + g) * tf + (time ? j : j * d.f));
          }
          u.bases.push_back(std::move(bases));
        }
      }
      break;
    }
    case SeqAxis::kChannel: {
      u.stride = tf;
      u.len = group;
      for (std::size_t s = 0; s < d.b / group; ++s) {
        for (std::size_t p = 0; p < tf; ++p) u.bases.push_back({s * group * tf + p});
      }
      break;
    }
  }
  return u;
}

template <typename T>
void Gather(const T* src, std::size_t cols, std::size_t base, std::size_t stride,
            std::size_t col0, RowMatrix<T>& dst) {
  for (Eigen::Index i = 0; i < dst.rows(); ++i) {
    const T* row = src + (base + static_cast<std::size_t>(i) * stride) * cols + col0;
    std::copy(row, row + dst.cols(), dst.data() + i * dst.cols());
  }
}

template <typename T>
void ScatterAdd(const RowMatrix<T>& src, T* dst, std::size_t cols, std::size_t base,
                std::size_t stride, std::size_t col0) {
  for (Eigen::Index i = 0; i < src.rows(); ++i) {
    T* row = dst + (base + static_cast<std::size_t>(i) * stride) * cols + col0;
    const T* s = src.data() + i * src.cols();
    for (Eigen::Index j = 0; j < src.cols(); ++j) row[j] += s[j];
  }
}

}  // namespace

template <typename T>
Var<T> Attention(const Var<T>& qkv, std::size_t heads, std::size_t head_dim,
                 const AttentionLayout& layout) {
  const Dims4 d = FeatureDims(qkv.shape(), "Attention");
  const std::size_t inner = heads * head_dim;
  if (heads == 0 || head_dim == 0 || d.c != 3 * inner) {
    throw InvalidInput("Attention: packed projection width " + std::to_string(d.c) +
                       " != 3 * heads * head_dim");
  }
  if (layout.rope && head_dim % 2 != 0) throw ConfigError("rotary encoding needs an even head dimension");
  const AttentionUnits units = BuildUnits(d, layout);
  const bool rope = layout.rope && layout.axis != SeqAxis::kChannel;
  const bool keep = GradMode::enabled() && qkv.requires_grad();
  Tensor<T> out({d.b, d.t, d.f, inner});
  const std::size_t n_units = units.bases.size();
  std::vector<RowMatrix<T>> saved(keep ? n_units * heads : 0);
  const T* src = qkv.value().data();
  T* dst = out.data();
  const std::size_t cols = d.c;
  const std::size_t len = units.len;

#pragma omp parallel for schedule(static)
  for (std::size_t ui = 0; ui < n_units; ++ui) {
    const auto& bases = units.bases[ui];
    const std::size_t members = bases.size();
    std::vector<RowMatrix<T>> qs(members, RowMatrix<T>(len, head_dim));
    std::vector<RowMatrix<T>> ks(members, RowMatrix<T>(len, head_dim));
    RowMatrix<T> v(len, head_dim), o(len, head_dim);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t g = 0; g < members; ++g) {
        Gather(src, cols, bases[g], units.stride, h * head_dim, qs[g]);
        Gather(src, cols, bases[g], units.stride, inner + h * head_dim, ks[g]);
        if (rope) {
          ApplyRope(qs[g], false);
          ApplyRope(ks[g], false);
        }
      }
      RowMatrix<T> a = SharedAttentionWeights<T>(qs, ks);
      for (std::size_t g = 0; g < members; ++g) {
        Gather(src, cols, bases[g], units.stride, 2 * inner + h * head_dim, v);
        o.noalias() = a * v;
        for (std::size_t i = 0; i < len; ++i) {
          T* row = dst + (bases[g] + i * units.stride) * inner + h * head_dim;
          std::copy(o.data() + i * head_dim, o.data() + (i + 1) * head_dim, row);
        }
      }
      if (keep) saved[ui * heads + h] = std::move(a);
    }
  }

  return MakeResult<T>(std::move(out), {qkv},
                       [units, heads, head_dim, rope, saved = std::move(saved)](Node<T>& n) {
    auto* px = Parent(n, 0);
    if (!px) return;
    const std::size_t inner = heads * head_dim;
    const std::size_t cols = 3 * inner;
    const std::size_t len = units.len;
    const T* src = n.parents[0]->value.data();
    T* dsrc = px->grad_buffer().data();
    const T* dout = n.grad.data();
    const std::size_t n_units = units.bases.size();

#pragma omp parallel for schedule(static)
    for (std::size_t ui = 0; ui < n_units; ++ui) {
      const auto& bases = units.bases[ui];
      const std::size_t members = bases.size();
      const T scale = T(1) / std::sqrt(static_cast<T>(head_dim * members));
      RowMatrix<T> q(len, head_dim), k(len, head_dim), v(len, head_dim), go(len, head_dim);
      RowMatrix<T> dq, dk, dv;
      for (std::size_t h = 0; h < heads; ++h) {
        const RowMatrix<T>& a = saved[ui * heads + h];
        RowMatrix<T> da = RowMatrix<T>::Zero(len, len);
        for (std::size_t g = 0; g < members; ++g) {
          Gather(src, cols, bases[g], units.stride, 2 * inner + h * head_dim, v);
          Gather(dout, inner, bases[g], units.stride, h * head_dim, go);
          da.noalias() += go * v.transpose();
          dv.noalias() = a.transpose() * go;
          ScatterAdd(dv, dsrc, cols, bases[g], units.stride, 2 * inner + h * head_dim);
        }
        // Softmax backward: dS = A * (dA - rowsum(dA * A)).
        const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = (da.array() * a.array()).rowwise().sum();
        RowMatrix<T> ds = a.array() * (da.colwise() - rs).array();
        ds *= scale;
        for (std::size_t g = 0; g < members; ++g) {
          Gather(src, cols, bases[g], units.stride, h * head_dim, q);
          Gather(src, cols, bases[g], units.stride, inner + h * head_dim, k);
          if (rope) {
            ApplyRope(q, false);
            ApplyRope(k, false);
          }
          dq.noalias() = ds * k;
          dk.noalias() = ds.transpose() * q;
          if (rope) {
            ApplyRope(dq, true);
            ApplyRope(dk, true);
          }
          ScatterAdd(dq, dsrc, cols, bases[g], units.stride, h * head_dim);
          ScatterAdd(dk, dsrc, cols, bases[g], units.stride, inner + h * head_dim);
        }
      }
    }
  });
}

template <typename T>
Var<T> GroupMean(const Var<T>& x, std::size_t group) {
  const auto& xs = x.shape();
  if (group == 0 || xs.front() % group != 0) {
    throw InvalidInput("GroupMean: batch not divisible by group");
  }
  Shape ys = xs;
  ys.front() /= group;
  const std::size_t per = x.value().size() / xs.front();
  Tensor<T> out(ys);
  const T inv = T(1) / static_cast<T>(group);
  for (std::size_t s = 0; s < ys.front(); ++s) {
    for (std::size_t g = 0; g < group; ++g) {
      const T* xp = x.value().data() + (s * group + g) * per;
      T* yp = out.data() + s * per;
      for (std::size_t i = 0; i < per; ++i) yp[i] += xp[i] * inv;
    }
  }
  return MakeResult<T>(std::move(out), {x}, [group, per, inv](Node<T>& n) {
    auto* px = Parent(n, 0);
    if (!px) return;
    const std::size_t scenes = n.value.dim(0);
    for (std::size_t s = 0; s < scenes; ++s) {
      for (std::size_t g = 0; g < group; ++g) {
        T* dx = px->grad_buffer().data() + (s * group + g) * per;
        const T* dy = n.grad.data() + s * per;
        for (std::size_t i = 0; i < per; ++i) dx[i] += dy[i] * inv;
      }
    }
  });
}

template <typename T>
Var<T> GroupBroadcast(const Var<T>& x, std::size_t group) {
  const auto& xs = x.shape();
  Shape ys = xs;
  ys.front() *= group;
  const std::size_t per = x.value().size() / xs.front();
  Tensor<T> out(ys);
  for (std::size_t s = 0; s < xs.front(); ++s) {
    for (std::size_t g = 0; g < group; ++g) {
      std::copy(x.value().data() + s * per, x.value().data() + (s + 1) * per,
                out.data() + (s * group + g) * per);
    }
  }
  return MakeResult<T>(std::move(out), {x}, [group, per](Node<T>& n) {
    auto* px = Parent(n, 0);
    if (!px) return;
    const std::size_t scenes = n.parents[0]->value.dim(0);
    for (std::size_t s = 0; s < scenes; ++s) {
      T* dx = px->grad_buffer().data() + s * per;
      for (std::size_t g = 0; g < group; ++g) {
        const T* dy = n.grad.data() + (s * group + g) * per;
        for (std::size_t i = 0; i < per; ++i) dx[i] += dy[i];
      }
    }
  });
}

template <typename T>
Var<T> ConcatLast(const Var<T>& a, const Var<T>& b) {
  Shape as = a.shape(), bs = b.shape();
  const std::size_t ca = as.back(), cb = bs.back();
  as.pop_back();
  bs.pop_back();
  if (as != bs) throw InvalidInput("ConcatLast: leading dims differ");
  Shape ys = as;
  ys.push_back(ca + cb);
  Tensor<T> out(ys);
  out.matrix().leftCols(ca) = a.value().matrix();
  out.matrix().rightCols(cb) = b.value().matrix();
  return MakeResult<T>(std::move(out), {a, b}, [ca, cb](Node<T>& n) {
    if (auto* pa = Parent(n, 0)) pa->grad_buffer().matrix() += n.grad.matrix().leftCols(ca);
    if (auto* pb = Parent(n, 1)) pb->grad_buffer().matrix() += n.grad.matrix().rightCols(cb);
  });
}

template <typename T>
Var<T> ConcatTime(const Var<T>& a, const Var<T>& b) {
  const Dims4 da = FeatureDims(a.shape(), "ConcatTime");
  const Dims4 db = FeatureDims(b.shape(), "ConcatTime");
  if (da.b != db.b || da.f != db.f || da.c != db.c) throw InvalidInput("ConcatTime: shape mismatch");
  const std::size_t frame = da.f * da.c;
  const std::size_t tt = da.t + db.t;
  Tensor<T> out({da.b, tt, da.f, da.c});
  for (std::size_t bi = 0; bi < da.b; ++bi) {
    const T* pa = a.value().data() + bi * da.t * frame;
    const T* pb = b.value().data() + bi * db.t * frame;
    T* y = out.data() + bi * tt * frame;
    std::copy(pa, pa + da.t * frame, y);
    std::copy(pb, pb + db.t * frame, y + da.t * frame);
  }
  return MakeResult<T>(std::move(out), {a, b}, [da, db, frame, tt](Node<T>& n) {
    auto* pa = Parent(n, 0);
    auto* pb = Parent(n, 1);
    for (std::size_t bi = 0; bi < da.b; ++bi) {
      const T* g = n.grad.data() + bi * tt * frame;
      if (pa) {
        T* dst = pa->grad_buffer().data() + bi * da.t * frame;
        for (std::size_t i = 0; i < da.t * frame; ++i) dst[i] += g[i];
      }
      if (pb) {
        T* dst = pb->grad_buffer().data() + bi * db.t * frame;
        for (std::size_t i = 0; i < db.t * frame; ++i) dst[i] += g[da.t * frame + i];
      }
    }
  });
}

template <typename T>
Var<T> SliceTime(const Var<T>& x, std::size_t start, std::size_t len) {
  const Dims4 d = FeatureDims(x.shape(), "SliceTime");
  if (start + len > d.t) throw InvalidInput("SliceTime: range exceeds time axis");
  const std::size_t frame = d.f * d.c;
  Tensor<T> out({d.b, len, d.f, d.c});
  for (std::size_t bi = 0; bi < d.b; ++bi) {
    const T* src = x.value().data() + (bi * d.t + start) * frame;
    std::copy(src, src + len * frame, out.data() + bi * len * frame);
  }
  return MakeResult<T>(std::move(out), {x}, [d, start, len, frame](Node<T>& n) {
    auto* px = Parent(n, 0);
    if (!px) return;
    for (std::size_t bi = 0; bi < d.b; ++bi) {
      T* dst = px->grad_buffer().data() + (bi * d.t + start) * frame;
      const T* g = n.grad.data() + bi * len * frame;
      for (std::size_t i = 0; i < len * frame; ++i) dst[i] += g[i];
    }
  });
}

template <typename T>
Var<T> BroadcastPrompt(const Var<T>& p, std::size_t batch, std::size_t frames, std::size_t freq) {
  const std::size_t c = p.value().size();
  Tensor<T> out({batch, frames, freq, c});
  const std::size_t rows = batch * frames * freq;
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(p.value().data(), p.value().data() + c, out.data() + r * c);
  }
  return MakeResult<T>(std::move(out), {p}, [rows, c](Node<T>& n) {
    auto* pp = Parent(n, 0);
    if (!pp) return;
    T* dp = pp->grad_buffer().data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < c; ++i) dp[i] += n.grad[r * c + i];
    }
  });
}

template <typename T>
Var<T> ConcatBatch(std::span<const Var<T>> xs) {
  if (xs.empty()) throw InvalidInput("ConcatBatch: empty input list");
  const Shape& s0 = xs[0].shape();
  for (const auto& x : xs) RequireSameShape(x.shape(), s0, "ConcatBatch");
  Shape ys = s0;
  ys.front() *= xs.size();
  const std::size_t per = xs[0].value().size();
  Tensor<T> out(ys);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::copy(xs[i].value().data(), xs[i].value().data() + per, out.data() + i * per);
  }
  std::vector<Var<T>> inputs(xs.begin(), xs.end());
  return MakeResultFrom<T>(std::move(out), inputs, [per](Node<T>& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i) {
      if (auto* p = Parent(n, i)) {
        T* dst = p->grad_buffer().data();
        for (std::size_t j = 0; j < per; ++j) dst[j] += n.grad[i * per + j];
      }
    }
  });
}

template <typename T>
Var<T> GatherBatch(const Var<T>& x, std::span<const std::size_t> indices) {
  const auto& xs = x.shape();
  const std::size_t per = x.value().size() / xs.front();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  for (auto i : idx) {
    if (i >= xs.front()) throw InvalidInput("GatherBatch: index out of range");
  }
  Shape ys = xs;
  ys.front() = idx.size();
  Tensor<T> out(ys);
  for (std::size_t j = 0; j < idx.size(); ++j) {
    std::copy(x.value().data() + idx[j] * per, x.value().data() + (idx[j] + 1) * per,
              out.data() + j * per);
  }
  return MakeResult<T>(std::move(out), {x}, [idx, per](Node<T>& n) {
    auto* px = Parent(n, 0);
    if (!px) return;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      T* dst = px->grad_buffer().data() + idx[j] * per;
      const T* g = n.grad.data() + j * per;
      for (std::size_t i = 0; i < per; ++i) dst[i] += g[i];
    }
  });
}

template <typename T>
Var<T> PromptGate(const Var<T>& prompts, const Var<T>& mix) {
  const Dims4 dp = FeatureDims(prompts.shape(), "PromptGate");
  const Dims4 dm = FeatureDims(mix.shape(), "PromptGate");
  if (dp.b != dm.b || dp.f != dm.f || dp.c != dm.c) throw InvalidInput("PromptGate: shape mismatch");
  const std::size_t frame = dm.f * dm.c;
  const std::size_t speakers = dp.t;
  Tensor<T> out({dm.b * speakers, dm.t, dm.f, dm.c});
  for (std::size_t s = 0; s < dm.b; ++s) {
    for (std::size_t n = 0; n < speakers; ++n) {
      const T* p = prompts.value().data() + (s * speakers + n) * frame;
      T* y = out.data() + (s * speakers + n) * dm.t * frame;
      const T* z = mix.value().data() + s * dm.t * frame;
      for (std::size_t t = 0; t < dm.t; ++t) {
        for (std::size_t i = 0; i < frame; ++i) y[t * frame + i] = p[i] * z[t * frame + i];
      }
    }
  }
  return MakeResult<T>(std::move(out), {prompts, mix}, [dm, speakers, frame](Node<T>& n) {
    auto* pp = Parent(n, 0);
    auto* pm = Parent(n, 1);
    const T* pv = n.parents[0]->value.data();
    const T* zv = n.parents[1]->value.data();
    for (std::size_t s = 0; s < dm.b; ++s) {
      for (std::size_t k = 0; k < speakers; ++k) {
        const T* p = pv + (s * speakers + k) * frame;
        const T* z = zv + s * dm.t * frame;
        const T* g = n.grad.data() + (s * speakers + k) * dm.t * frame;
        for (std::size_t t = 0; t < dm.t; ++t) {
          for (std::size_t i = 0; i < frame; ++i) {
            if (pp) pp->grad_buffer()[(s * speakers + k) * frame + i] += g[t * frame + i] * z[t * frame + i];
            if (pm) pm->grad_buffer()[s * dm.t * frame + t * frame + i] += g[t * frame + i] * p[i];
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> WeightedSum(const Var<T>& x, const Tensor<T>& w) {
  RequireSameShape(x.shape(), w.shape(), "WeightedSum");
  Tensor<T> out({1});
  out[0] = (x.value().matrix().array() * w.matrix().array()).sum();
  return MakeResult<T>(std::move(out), {x}, [w](Node<T>& n) {
    if (auto* px = Parent(n, 0)) px->grad_buffer().matrix() += n.grad[0] * w.matrix();
  });
}

#define FLEXIO_INSTANTIATE_OPS(T)                                                          \
  template Var<T> Add(const Var<T>&, const Var<T>&);                                       \
  template Var<T> Mul(const Var<T>&, const Var<T>&);                                       \
  template Var<T> Scale(const Var<T>&, T);                                                 \
  template Var<T> Linear(const Var<T>&, const Var<T>&, const Var<T>&);                     \
  template Var<T> ShiftedConv(const Var<T>&, const Var<T>&, const Var<T>&,                 \
                              std::span<const ConvTap>);                                   \
  template Var<T> SwiGlu(const Var<T>&);                                                   \
  template Var<T> PRelu(const Var<T>&, const Var<T>&);                                     \
  template Var<T> RmsGroupNorm(const Var<T>&, std::size_t, const Var<T>&, const Var<T>&, T); \
  template Var<T> GlobalLayerNorm(const Var<T>&, const Var<T>&, const Var<T>&, T);         \
  template void ApplyRope(RowMatrix<T>&, bool);                                            \
  template RowMatrix<T> SharedAttentionWeights(std::span<const RowMatrix<T>>,              \
                                               std::span<const RowMatrix<T>>);             \
  template Var<T> Attention(const Var<T>&, std::size_t, std::size_t, const AttentionLayout&); \
  template Var<T> GroupMean(const Var<T>&, std::size_t);                                   \
  template Var<T> GroupBroadcast(const Var<T>&, std::size_t);                              \
  template Var<T> ConcatLast(const Var<T>&, const Var<T>&);                                \
  template Var<T> ConcatTime(const Var<T>&, const Var<T>&);                                \
  template Var<T> SliceTime(const Var<T>&, std::size_t, std::size_t);                      \
  template Var<T> BroadcastPrompt(const Var<T>&, std::size_t, std::size_t, std::size_t);   \
  template Var<T> GatherBatch(const Var<T>&, std::span<const std::size_t>);                \
  template Var<T> ConcatBatch(std::span<const Var<T>>);                                    \
  template Var<T> PromptGate(const Var<T>&, const Var<T>&);                                \
  template Var<T> WeightedSum(const Var<T>&, const Tensor<T>&);

FLEXIO_INSTANTIATE_OPS(float)
FLEXIO_INSTANTIATE_OPS(double)

}  // namespace flexio::ops
