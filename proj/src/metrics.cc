#include "flexio/metrics.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "flexio/errors.h"
#include "flexio/loss.h"

namespace flexio {

double SiSdr(std::span<const double> est, std::span<const double> ref) {
  if (est.size() != ref.size()) throw InvalidInput("SiSdr: length mismatch");
  double ref_e = 0.0, dot = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    ref_e += ref[i] * ref[i];
    dot += est[i] * ref[i];
  }
  if (ref_e <= 0.0) throw InvalidTarget("SiSdr: reference is identically zero");
  const double alpha = dot / ref_e;
  double target = 0.0, err = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double t = alpha * ref[i];
    target += t * t;
    err += (t - est[i]) * (t - est[i]);
  }
  if (err <= 0.0) return target > 0.0 ? kSiSdrClampDb : -kSiSdrClampDb;
  if (target <= 0.0) return -kSiSdrClampDb;
  return std::clamp(10.0 * std::log10(target / err), -kSiSdrClampDb, kSiSdrClampDb);
}

double SiSdrImprovement(std::span<const double> est, std::span<const double> ref, std::span<const double> mix) {
  return SiSdr(est, ref) - SiSdr(mix, ref);
}

UtteranceScore ScoreUtterance(const Waveform& estimates, const Waveform& references,
                              std::span<const double> mix_ref_channel) {
  const std::size_t n = references.channels;
  if (estimates.channels != n || estimates.length != references.length ||
      mix_ref_channel.size() != references.length) {
    throw InvalidInput("ScoreUtterance: estimates, references and mixture differ in shape");
  }
  if (n > kMaxPitSpeakers) throw ComplexityError("ScoreUtterance: too many speakers");
  std::vector<double> sdr(n * n);
  for (std::size_t e = 0; e < n; ++e) {
    for (std::size_t r = 0; r < n; ++r) sdr[e * n + r] = SiSdr(estimates.channel(e), references.channel(r));
  }
  std::vector<std::size_t> perm(n), best;
  std::iota(perm.begin(), perm.end(), 0);
  double best_sum = -std::numeric_limits<double>::infinity();
  do {
    double sum = 0.0;
    for (std::size_t r = 0; r < n; ++r) sum += sdr[perm[r] * n + r];
    if (sum > best_sum) {
      best_sum = sum;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  UtteranceScore score;
  score.speakers = n;
  double mix_sum = 0.0;
  for (std::size_t r = 0; r < n; ++r) mix_sum += SiSdr(mix_ref_channel, references.channel(r));
  score.mean_sisdr = best_sum / static_cast<double>(n);
  score.mean_sisdri = (best_sum - mix_sum) / static_cast<double>(n);
  return score;
}

template <typename T>
std::vector<UtteranceScore> ScoreScenes(const FlexioModel<T>& model, std::span<const Scene> scenes,
                                        std::size_t ref_channel) {
  std::vector<UtteranceScore> scores;
  scores.reserve(scenes.size());
  for (const Scene& scene : scenes) {
    const SeparationResult out = model.Separate(scene.mixture, scene.speakers(), ref_channel);
    UtteranceScore s = ScoreUtterance(out.sources, scene.targets, scene.mixture.channel(ref_channel));
    s.channels = scene.channels();
    scores.push_back(s);
  }
  return scores;
}

template <typename T>
std::vector<EvalRow> Evaluate(const FlexioModel<T>& model, std::span<const Scene> scenes, std::size_t ref_channel) {
  const std::vector<UtteranceScore> scores = ScoreScenes(model, scenes, ref_channel);
  return Aggregate(scores);
}

template <typename T>
std::vector<EvalRow> Evaluate(const FlexioModel<T>& model, const Manifest& manifest, std::size_t ref_channel) {
  std::vector<UtteranceScore> scores;
  for (const ManifestRecord& record : manifest.records) {
    const Scene scene = LoadScene(manifest, record);
    const std::vector<UtteranceScore> one = ScoreScenes(model, std::span<const Scene>(&scene, 1), ref_channel);
    scores.push_back(one[0]);
  }
  return Aggregate(scores);
}

std::vector<EvalRow> Aggregate(std::span<const UtteranceScore> scores) {
  std::map<std::pair<std::size_t, std::size_t>, EvalRow> groups;
  for (const UtteranceScore& s : scores) {
    EvalRow& row = groups[{s.speakers, s.channels}];
    row.speakers = s.speakers;
    row.channels = s.channels;
    ++row.count;
    row.mean_sisdr += s.mean_sisdr;
    row.mean_sisdri += s.mean_sisdri;
  }
  std::vector<EvalRow> rows;
  for (auto& [key, row] : groups) {
    row.mean_sisdr /= static_cast<double>(row.count);
    row.mean_sisdri /= static_cast<double>(row.count);
    rows.push_back(row);
  }
  return rows;
}

void WriteEvalCsv(const std::filesystem::path& path, std::span<const EvalRow> rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write report: " + path.string());
  out << "N,M,count,mean_sisdr,mean_sisdri\n";
  out.precision(6);
  out << std::fixed;
  for (const EvalRow& r : rows) {
    out << r.speakers << ',' << r.channels << ',' << r.count << ',' << r.mean_sisdr << ',' << r.mean_sisdri << '\n';
  }
}

template std::vector<UtteranceScore> ScoreScenes(const FlexioModel<float>&, std::span<const Scene>, std::size_t);
template std::vector<UtteranceScore> ScoreScenes(const FlexioModel<double>&, std::span<const Scene>, std::size_t);
template std::vector<EvalRow> Evaluate(const FlexioModel<float>&, std::span<const Scene>, std::size_t);
template std::vector<EvalRow> Evaluate(const FlexioModel<double>&, std::span<const Scene>, std::size_t);
template std::vector<EvalRow> Evaluate(const FlexioModel<float>&, const Manifest&, std::size_t);
template std::vector<EvalRow> Evaluate(const FlexioModel<double>&, const Manifest&, std::size_t);

}  // namespace flexio
