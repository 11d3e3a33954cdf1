#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "flexio/model.h"
#include "flexio/synth.h"

namespace flexio {

inline constexpr double kSiSdrClampDb = 60.0;

// Scale-invariant SDR in dB, clamped to [-60, 60]. Throws InvalidTarget for
// an all-zero reference.
double SiSdr(std::span<const double> est, std::span<const double> ref);
double SiSdrImprovement(std::span<const double> est, std::span<const double> ref,
                        std::span<const double> mix);

// Per-utterance scores after choosing the estimate-to-reference assignment
// with the highest mean SI-SDR.
struct UtteranceScore {
  std::size_t speakers = 0;
  std::size_t channels = 0;
  double mean_sisdr = 0.0;
  double mean_sisdri = 0.0;
};

UtteranceScore ScoreUtterance(const Waveform& estimates, const Waveform& references,
                              std::span<const double> mix_ref_channel);

struct EvalRow {
  std::size_t speakers = 0;
  std::size_t channels = 0;
  std::size_t count = 0;
  double mean_sisdr = 0.0;
  double mean_sisdri = 0.0;
};

// Runs the model on every scene and aggregates per (N, M), sorted by (N, M).
// Targets are images at `ref_channel` of each mixture.
template <typename T>
std::vector<UtteranceScore> ScoreScenes(const FlexioModel<T>& model, std::span<const Scene> scenes,
                                        std::size_t ref_channel = 0);
template <typename T>
std::vector<EvalRow> Evaluate(const FlexioModel<T>& model, std::span<const Scene> scenes,
                              std::size_t ref_channel = 0);
template <typename T>
std::vector<EvalRow> Evaluate(const FlexioModel<T>& model, const Manifest& manifest,
                              std::size_t ref_channel = 0);

std::vector<EvalRow> Aggregate(std::span<const UtteranceScore> scores);
void WriteEvalCsv(const std::filesystem::path& path, std::span<const EvalRow> rows);

}  // namespace flexio
