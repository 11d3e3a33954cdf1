#pragma once

#include <span>
#include <vector>

#include "flexio/autograd.h"
#include "flexio/stft.h"

namespace flexio {

// Floor on the error power relative to the reference power; bounds the loss
// at -80 dB for a perfect estimate.
inline constexpr double kSnrFloor = 1e-8;
inline constexpr std::size_t kMaxPitSpeakers = 6;

// -10 log10(|ref|^2 / (|ref - est|^2 + eps |ref|^2)). Throws InvalidTarget
// for an all-zero reference.
double NegSnrLoss(std::span<const double> est, std::span<const double> ref, double eps = kSnrFloor);

struct PitResult {
  double loss = 0.0;
  // permutation[n] is the estimate assigned to reference n.
  std::vector<std::size_t> permutation;
};

// Minimum over all N! assignments of the mean pairwise NegSnrLoss. The first
// permutation in lexicographic order wins ties. N > kMaxPitSpeakers throws
// ComplexityError.
PitResult PitLoss(const Waveform& ests, const Waveform& refs);

// Differentiable batch version: `ests` is [S*N, L] (scene-major), `refs`
// holds S waveforms of N channels each. Returns the mean over scenes of the
// PIT loss; the chosen assignments are written to `picks` when non-null.
template <typename T>
Var<T> PitNegSnrLoss(const Var<T>& ests, std::span<const Waveform> refs,
                     std::vector<PitResult>* picks = nullptr);

}  // namespace flexio
