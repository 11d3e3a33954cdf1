#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numeric>
#include <vector>

#include "flexio/channel_comm.h"
#include "flexio/loss.h"
#include "flexio/stft.h"
#include "flexio/tensor.h"

namespace flexio::testing {

// Independent rotary encoding: pair (2i, 2i+1) rotated by pos * 10000^(-2i/d).
inline std::vector<double> Rotate(const double* x, std::size_t d, std::size_t pos) {
  std::vector<double> y(d);
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double theta = static_cast<double>(pos) * std::pow(10000.0, -2.0 * i / d);
    const std::complex<double> z(x[2 * i], x[2 * i + 1]);
    const std::complex<double> r = z * std::polar(1.0, theta);
    y[2 * i] = r.real();
    y[2 * i + 1] = r.imag();
  }
  return y;
}

// Row-wise softmax(gain * Q K^T / sqrt(Dh)) with explicit loops.
inline std::vector<std::vector<double>> NaiveWeights(const RowMatrix<double>& q, const RowMatrix<double>& k,
                                                     double gain = 1.0) {
  const auto len = q.rows(), keys = k.rows(), dh = q.cols();
  std::vector<std::vector<double>> w(len, std::vector<double>(keys));
  for (Eigen::Index i = 0; i < len; ++i) {
    double mx = -1e300;
    for (Eigen::Index j = 0; j < keys; ++j) {
      double s = 0;
      for (Eigen::Index c = 0; c < dh; ++c) s += q(i, c) * k(j, c);
      w[i][j] = gain * s / std::sqrt(static_cast<double>(dh));
      mx = std::max(mx, w[i][j]);
    }
    double z = 0;
    for (double& v : w[i]) z += (v = std::exp(v - mx));
    for (double& v : w[i]) v /= z;
  }
  return w;
}

// Naive multi-head attention along time for every (b, f), packed [Q|K|V].
// `gain` multiplies every logit.
inline Tensor<double> NaiveTimeAttention(const Tensor<double>& qkv, std::size_t heads, std::size_t dh, bool rope,
                                         double gain = 1.0) {
  const std::size_t b = qkv.dim(0), t = qkv.dim(1), f = qkv.dim(2), inner = heads * dh;
  Tensor<double> out({b, t, f, inner});
  auto at = [&](std::size_t bi, std::size_t ti, std::size_t fi, std::size_t c) {
    return &qkv.data()[((bi * t + ti) * f + fi) * 3 * inner + c];
  };
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t fi = 0; fi < f; ++fi) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < t; ++i) {
          std::vector<double> q(at(bi, i, fi, h * dh), at(bi, i, fi, h * dh) + dh);
          if (rope) q = Rotate(q.data(), dh, i);
          std::vector<double> logits(t);
          double mx = -1e300;
          for (std::size_t j = 0; j < t; ++j) {
            std::vector<double> k(at(bi, j, fi, inner + h * dh), at(bi, j, fi, inner + h * dh) + dh);
            if (rope) k = Rotate(k.data(), dh, j);
            double s = 0;
            for (std::size_t c = 0; c < dh; ++c) s += q[c] * k[c];
            logits[j] = gain * s / std::sqrt(static_cast<double>(dh));
            mx = std::max(mx, logits[j]);
          }
          double z = 0;
          for (double& l : logits) z += (l = std::exp(l - mx));
          for (std::size_t c = 0; c < dh; ++c) {
            double acc = 0;
            for (std::size_t j = 0; j < t; ++j) acc += logits[j] / z * *at(bi, j, fi, 2 * inner + h * dh + c);
            out.data()[((bi * t + i) * f + fi) * inner + h * dh + c] = acc;
          }
        }
      }
    }
  }
  return out;
}

// Single-channel TAC written as three plain fully connected layers per TF
// bin: y = x + norm(FC_cat [prelu(FC_in x); prelu(FC_avg prelu(FC_in x))]).
inline Tensor<double> PlainFcTac(const Tensor<double>& x, const TacParams<double>& p, std::size_t groups,
                                 double eps) {
  const std::size_t d = x.dim(3), e = p.in_b.value().size(), rows = x.size() / d;
  const auto& in_w = p.in_w.value();
  const auto& avg_w = p.avg_w.value();
  const auto& cat_w = p.cat_w.value();
  const double a1 = p.in_slope.value()[0], a2 = p.avg_slope.value()[0];
  auto prelu = [](double v, double a) { return v >= 0 ? v : a * v; };
  Tensor<double> y(x.shape());
  std::vector<double> w(e), g(e), c(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    for (std::size_t j = 0; j < e; ++j) {
      double s = p.in_b.value()[j];
      for (std::size_t i = 0; i < d; ++i) s += xr[i] * in_w[i * e + j];
      w[j] = prelu(s, a1);
    }
    for (std::size_t j = 0; j < e; ++j) {
      double s = p.avg_b.value()[j];
      for (std::size_t i = 0; i < e; ++i) s += w[i] * avg_w[i * e + j];
      g[j] = prelu(s, a2);
    }
    for (std::size_t o = 0; o < d; ++o) {
      double s = p.cat_b.value()[o];
      for (std::size_t i = 0; i < e; ++i) s += w[i] * cat_w[i * d + o] + g[i] * cat_w[(e + i) * d + o];
      c[o] = s;
    }
    const std::size_t gs = d / groups;
    for (std::size_t gi = 0; gi < groups; ++gi) {
      double ms = 0;
      for (std::size_t i = 0; i < gs; ++i) ms += c[gi * gs + i] * c[gi * gs + i];
      const double rms = std::sqrt(ms / gs + eps);
      for (std::size_t i = 0; i < gs; ++i) {
        const std::size_t o = gi * gs + i;
        y.data()[r * d + o] = xr[o] + c[o] / rms * p.norm.scale.value()[o] + p.norm.bias.value()[o];
      }
    }
  }
  return y;
}

// Negative SNR with the 1e-8 relative floor, written out directly.
inline double DirectNegSnr(std::span<const double> est, std::span<const double> ref) {
  double r = 0, e = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    r += ref[i] * ref[i];
    e += (ref[i] - est[i]) * (ref[i] - est[i]);
  }
  return -10.0 * std::log10(r / (e + 1e-8 * r));
}

// Minimum mean loss over every permutation by explicit enumeration; ties keep
// the lexicographically first permutation.
inline PitResult BruteForcePit(const Waveform& ests, const Waveform& refs) {
  const std::size_t n = refs.channels;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  PitResult best{std::numeric_limits<double>::infinity(), {}};
  do {
    double total = 0;
    for (std::size_t k = 0; k < n; ++k) total += DirectNegSnr(ests.channel(perm[k]), refs.channel(k));
    if (total / n < best.loss) best = {total / n, perm};
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace flexio::testing
