#include "flexio/loss.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "flexio/errors.h"

namespace flexio {
namespace {

double Energy(std::span<const double> x) {
  double e = 0.0;
  for (double v : x) e += v * v;
  return e;
}

double ErrorEnergy(std::span<const double> est, std::span<const double> ref) {
  double e = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = ref[i] - est[i];
    e += d * d;
  }
  return e;
}

// Pairwise losses: cost[e * N + r] for estimate e against reference r.
PitResult SolvePit(const std::vector<double>& cost, std::size_t n) {
  if (n > kMaxPitSpeakers) {
    throw ComplexityError("PIT over " + std::to_string(n) + " speakers exceeds the limit of " +
                          std::to_string(kMaxPitSpeakers));
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  PitResult best;
  best.loss = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) total += cost[perm[r] * n + r];
    const double mean = total / static_cast<double>(n);
    if (mean < best.loss) {
      best.loss = mean;
      best.permutation = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

double NegSnrLoss(std::span<const double> est, std::span<const double> ref, double eps) {
  if (est.size() != ref.size()) throw InvalidInput("NegSnrLoss: length mismatch");
  const double ref_e = Energy(ref);
  if (ref_e <= 0.0) throw InvalidTarget("NegSnrLoss: reference is identically zero");
  return -10.0 * std::log10(ref_e / (ErrorEnergy(est, ref) + eps * ref_e));
}

PitResult PitLoss(const Waveform& ests, const Waveform& refs) {
  if (ests.channels != refs.channels || ests.length != refs.length) {
    throw InvalidInput("PitLoss: estimates and references differ in shape");
  }
  const std::size_t n = refs.channels;
  if (n > kMaxPitSpeakers) {
    throw ComplexityError("PIT over " + std::to_string(n) + " speakers exceeds the limit of " +
                          std::to_string(kMaxPitSpeakers));
  }
  std::vector<double> cost(n * n);
  for (std::size_t e = 0; e < n; ++e) {
    for (std::size_t r = 0; r < n; ++r) cost[e * n + r] = NegSnrLoss(ests.channel(e), refs.channel(r));
  }
  return SolvePit(cost, n);
}

template <typename T>
Var<T> PitNegSnrLoss(const Var<T>& ests, std::span<const Waveform> refs, std::vector<PitResult>* picks) {
  if (refs.empty() || ests.shape().size() != 2) throw InvalidInput("PitNegSnrLoss: bad shapes");
  const std::size_t n = refs[0].channels;
  const std::size_t len = ests.dim(1);
  const std::size_t scenes = refs.size();
  if (ests.dim(0) != scenes * n) throw InvalidInput("PitNegSnrLoss: estimate count mismatch");
  for (const auto& r : refs) {
    if (r.channels != n || r.length != len) throw InvalidInput("PitNegSnrLoss: reference shape mismatch");
  }
  Waveform est = Waveform::Zeros(n, len);
  std::vector<PitResult> chosen;
  double total = 0.0;
  for (std::size_t s = 0; s < scenes; ++s) {
    for (std::size_t i = 0; i < n * len; ++i) {
      est.samples[i] = static_cast<double>(ests.value()[s * n * len + i]);
    }
    chosen.push_back(PitLoss(est, refs[s]));
    total += chosen.back().loss;
  }
  Tensor<T> out({1});
  out[0] = static_cast<T>(total / static_cast<double>(scenes));
  if (picks) *picks = chosen;
  std::vector<Waveform> ref_copy(refs.begin(), refs.end());
  return MakeResult<T>(std::move(out), {ests}, [chosen, ref_copy = std::move(ref_copy), n, len](Node<T>& node) {
    Node<T>* p = node.parents[0].get();
    if (p == nullptr || !p->requires_grad) return;
    const double upstream = static_cast<double>(node.grad[0]);
    const double scale = upstream / static_cast<double>(ref_copy.size() * n);
    const double k = 10.0 / std::log(10.0);
    T* dx = p->grad_buffer().data();
    const T* xv = p->value.data();
    for (std::size_t s = 0; s < ref_copy.size(); ++s) {
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t e = chosen[s].permutation[r];
        const auto ref = ref_copy[s].channel(r);
        const T* est = xv + (s * n + e) * len;
        double err = 0.0, ref_e = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          const double d = ref[i] - static_cast<double>(est[i]);
          err += d * d;
          ref_e += ref[i] * ref[i];
        }
        // d/d est of 10 log10(|ref - est|^2 + eps |ref|^2).
        const double denom = err + kSnrFloor * ref_e;
        for (std::size_t i = 0; i < len; ++i) {
          const double d = ref[i] - static_cast<double>(est[i]);
          dx[(s * n + e) * len + i] += static_cast<T>(scale * k * (-2.0 * d) / denom);
        }
      }
    }
  });
}

template Var<float> PitNegSnrLoss(const Var<float>&, std::span<const Waveform>, std::vector<PitResult>*);
template Var<double> PitNegSnrLoss(const Var<double>&, std::span<const Waveform>, std::vector<PitResult>*);

}  // namespace flexio
