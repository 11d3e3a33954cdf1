#include "flexio/train.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "flexio/checkpoint.h"
#include "flexio/config.h"
#include "flexio/errors.h"
#include "flexio/seed.h"

namespace flexio {
namespace {

// Channel-stacked spectrogram planes, reference-channel spectrograms and
// targets for one (N, M) group.
template <typename T>
Var<T> Estimates(const FlexioModel<T>& model, std::span<const Scene> scenes, std::size_t ref_channel) {
  const StftConfig& stft = model.config().stft;
  const std::size_t speakers = scenes[0].speakers(), channels = scenes[0].channels();
  const std::size_t length = scenes[0].mixture.length;
  std::vector<ComplexSpec> specs, refs;
  for (const Scene& s : scenes) {
    if (s.speakers() != speakers || s.channels() != channels || s.mixture.length != length) {
      throw InvalidInput("scenes in one batch must share N, M and length");
    }
    specs.push_back(Stft(s.mixture, stft));
    refs.push_back(specs.back().Channel(ref_channel));
  }
  const Tensor<T> planes = SpecToPlanes<T>(specs);
  Var<T> masks = model.ForwardMasks(planes, channels, speakers, ref_channel);
  return MaskedIstft(masks, std::span<const ComplexSpec>(refs), speakers, stft, length);
}

std::vector<Waveform> Targets(std::span<const Scene> scenes) {
  std::vector<Waveform> t;
  t.reserve(scenes.size());
  for (const Scene& s : scenes) t.push_back(s.targets);
  return t;
}

}  // namespace

void TrainConfig::Validate() const {
  if (batch_size == 0 || steps_per_epoch == 0 || max_epochs == 0) {
    throw ConfigError("train: batch_size, steps_per_epoch and max_epochs must be positive");
  }
  if (!(crop_seconds > 0) || !(peak_lr > 0) || weight_decay < 0 || grad_clip < 0) {
    throw ConfigError("train: crop_seconds and peak_lr must be positive, weight_decay and grad_clip >= 0");
  }
  if (plateau_patience == 0 || halt_patience == 0) throw ConfigError("train: patience values must be positive");
  if (nm_distribution.empty()) throw ConfigError("train: nm_distribution is empty");
  double total = 0.0;
  for (const NmWeight& w : nm_distribution) {
    if (w.speakers == 0 || w.channels == 0 || !(w.weight > 0)) {
      throw ConfigError("train: nm_distribution entries need N, M >= 1 and weight > 0");
    }
    total += w.weight;
  }
  if (std::abs(total - 1.0) > 1e-6) throw ConfigError("train: nm_distribution weights must sum to 1");
}

SceneGroups GroupScenes(std::span<const Scene> scenes) {
  SceneGroups groups;
  for (const Scene& s : scenes) groups[{s.speakers(), s.channels()}].push_back(&s);
  return groups;
}

Scene CropScene(const Scene& scene, std::size_t offset, std::size_t length) {
  if (offset + length > scene.mixture.length) throw InvalidInput("crop exceeds scene length");
  Scene out;
  out.seed = scene.seed;
  out.snr_db = scene.snr_db;
  out.mixture = Waveform::Zeros(scene.channels(), length);
  out.targets = Waveform::Zeros(scene.speakers(), length);
  for (std::size_t c = 0; c < scene.channels(); ++c) {
    std::copy_n(scene.mixture.channel(c).begin() + offset, length, out.mixture.channel(c).begin());
  }
  for (std::size_t n = 0; n < scene.speakers(); ++n) {
    std::copy_n(scene.targets.channel(n).begin() + offset, length, out.targets.channel(n).begin());
  }
  return out;
}

Batch SampleBatch(const SceneGroups& groups, const TrainConfig& cfg, std::mt19937_64& rng) {
  for (const NmWeight& w : cfg.nm_distribution) {
    const auto it = groups.find({w.speakers, w.channels});
    if (it == groups.end() || it->second.empty()) {
      throw DataError("no training scenes for (N=" + std::to_string(w.speakers) + ", M=" +
                      std::to_string(w.channels) + ")");
    }
  }
  std::vector<double> weights;
  for (const NmWeight& w : cfg.nm_distribution) weights.push_back(w.weight);
  std::discrete_distribution<std::size_t> pick_pair(weights.begin(), weights.end());
  const NmWeight& pair = cfg.nm_distribution[pick_pair(rng)];
  const auto& pool = groups.at({pair.speakers, pair.channels});

  std::uniform_int_distribution<std::size_t> pick_scene(0, pool.size() - 1);
  std::vector<const Scene*> chosen;
  for (std::size_t b = 0; b < cfg.batch_size; ++b) chosen.push_back(pool[pick_scene(rng)]);
  std::size_t length = static_cast<std::size_t>(std::lround(cfg.crop_seconds * kSampleRate));
  for (const Scene* s : chosen) length = std::min(length, s->mixture.length);

  Batch batch;
  batch.speakers = pair.speakers;
  batch.channels = pair.channels;
  for (const Scene* s : chosen) {
    std::uniform_int_distribution<std::size_t> pick_offset(0, s->mixture.length - length);
    batch.scenes.push_back(CropScene(*s, pick_offset(rng), length));
  }
  return batch;
}

double WarmupFactor(std::size_t step, std::size_t warmup_steps) {
  if (warmup_steps == 0 || step >= warmup_steps) return 1.0;
  return static_cast<double>(step) / static_cast<double>(warmup_steps);
}

std::size_t PlateauHalvings(std::span<const double> val_history, std::size_t patience) {
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0, halvings = 0;
  for (double v : val_history) {
    if (v < best) {
      best = v;
      stale = 0;
    } else if (++stale >= patience) {
      ++halvings;
      stale = 0;
    }
  }
  return halvings;
}

bool ShouldHalt(std::span<const double> val_history, std::size_t halt_patience) {
  if (val_history.empty()) return false;
  const auto best = std::min_element(val_history.begin(), val_history.end());
  const auto since = static_cast<std::size_t>(val_history.end() - best) - 1;
  return since >= halt_patience;
}

double LearningRate(std::size_t step, std::span<const double> val_history, const TrainConfig& cfg) {
  const double decay = std::ldexp(1.0, -static_cast<int>(PlateauHalvings(val_history, cfg.plateau_patience)));
  return cfg.peak_lr * WarmupFactor(step, cfg.warmup_steps) * decay;
}

std::uint64_t BatchSeed(std::uint64_t seed, std::size_t step) { return DeriveSeed(seed, step); }

template <typename T>
AdamW<T>::AdamW(const ParameterStore<T>& params, double weight_decay, double beta1, double beta2, double eps)
    : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
  for (const Var<T>& v : params.vars()) {
    m_.emplace_back(v.value().size(), 0.0);
    v_.emplace_back(v.value().size(), 0.0);
  }
}

template <typename T>
double AdamW<T>::Step(ParameterStore<T>& params, double lr, double grad_clip) {
  if (params.size() != m_.size()) throw InvalidInput("AdamW: parameter count changed");
  double sq = 0.0;
  for (const Var<T>& v : params.vars()) {
    if (!v.node()->has_grad()) continue;
    for (T g : v.grad().values()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  const double clip = (grad_clip > 0.0 && norm > grad_clip) ? grad_clip / norm : 1.0;
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var<T> v = params.vars()[i];
    const bool has = v.node()->has_grad();
    T* w = v.mutable_value().data();
    const T* g = has ? v.grad().data() : nullptr;
    std::vector<double>& m = m_[i];
    std::vector<double>& s = v_[i];
    for (std::size_t k = 0; k < m.size(); ++k) {
      const double gk = has ? clip * static_cast<double>(g[k]) : 0.0;
      m[k] = b1_ * m[k] + (1.0 - b1_) * gk;
      s[k] = b2_ * s[k] + (1.0 - b2_) * gk * gk;
      double wk = static_cast<double>(w[k]);
      wk -= lr * wd_ * wk;
      wk -= lr * (m[k] / c1) / (std::sqrt(s[k] / c2) + eps_);
      w[k] = static_cast<T>(wk);
    }
  }
  return norm;
}

template <typename T>
Var<T> BatchLoss(const FlexioModel<T>& model, std::span<const Scene> scenes, std::size_t ref_channel,
                 std::vector<PitResult>* picks) {
  if (scenes.empty()) throw InvalidInput("BatchLoss: empty batch");
  const Var<T> est = Estimates(model, scenes, ref_channel);
  const std::vector<Waveform> targets = Targets(scenes);
  return PitNegSnrLoss(est, std::span<const Waveform>(targets), picks);
}

template <typename T>
double EvaluateLoss(const FlexioModel<T>& model, std::span<const Scene> scenes, std::size_t ref_channel) {
  if (scenes.empty()) return std::numeric_limits<double>::quiet_NaN();
  NoGradGuard no_grad;
  double total = 0.0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    total += static_cast<double>(BatchLoss(model, scenes.subspan(i, 1), ref_channel).value()[0]);
  }
  return total / static_cast<double>(scenes.size());
}

TrainSummary Train(FlexioModel<float>& model, std::span<const Scene> train, std::span<const Scene> val,
                   const TrainConfig& cfg, const TrainOptions& options) {
  cfg.Validate();
  const SceneGroups groups = GroupScenes(train);
  const bool write = !options.out_dir.empty();
  std::ofstream csv;
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    csv.open(options.out_dir / "metrics.csv");
    if (!csv) throw DataError("cannot write " + (options.out_dir / "metrics.csv").string());
    csv << "step,epoch,lr,train_loss,val_loss\n";
    csv.precision(8);
  }

  AdamW<float> opt(model.params(), cfg.weight_decay);
  std::vector<double> history;
  TrainSummary summary;
  summary.best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    for (std::size_t k = 0; k < cfg.steps_per_epoch; ++k) {
      ++step;
      const std::uint64_t batch_seed = BatchSeed(cfg.seed, step);
      std::mt19937_64 rng(batch_seed);
      const Batch batch = SampleBatch(groups, cfg, rng);
      const double lr = LearningRate(step, history, cfg);

      model.params().ZeroGrad();
      const Var<float> loss = BatchLoss(model, std::span<const Scene>(batch.scenes), options.ref_channel);
      const double value = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(value)) {
        if (write) {
          WriteJsonFile(options.out_dir / "nan_batch.json",
                        {{"step", step}, {"epoch", epoch}, {"batch_seed", batch_seed}, {"N", batch.speakers},
                         {"M", batch.channels}, {"loss", std::to_string(value)}});
        }
        throw TrainingError("non-finite loss at step " + std::to_string(step) + " (batch seed " +
                            std::to_string(batch_seed) + ", N=" + std::to_string(batch.speakers) +
                            ", M=" + std::to_string(batch.channels) + ")");
      }
      Backward(loss);
      opt.Step(model.params(), lr, cfg.grad_clip);

      StepLog log;
      log.step = step;
      log.epoch = epoch;
      log.lr = lr;
      log.train_loss = value;
      log.val_loss = std::numeric_limits<double>::quiet_NaN();
      const bool epoch_end = k + 1 == cfg.steps_per_epoch;
      if (epoch_end) {
        log.val_loss = val.empty() ? value : EvaluateLoss(model, val, options.ref_channel);
        history.push_back(log.val_loss);
      }
      if (write) {
        csv << log.step << ',' << log.epoch << ',' << log.lr << ',' << log.train_loss << ',';
        if (epoch_end) csv << log.val_loss;
        csv << '\n';
      }
      if (options.on_step) options.on_step(log);
      summary.steps = step;
      if (epoch_end) {
        summary.epochs = epoch;
        if (log.val_loss < summary.best_val_loss) {
          summary.best_val_loss = log.val_loss;
          summary.best_epoch = epoch;
          if (write) SaveCheckpoint(options.out_dir / "best", model);
        }
        if (write) {
          SaveCheckpoint(options.out_dir / "last", model);
          csv.flush();
        }
      }
      if (options.stop && options.stop(log)) summary.stopped = true;
      if (summary.stopped || (cfg.max_steps != 0 && step >= cfg.max_steps)) break;
    }
    if (summary.stopped || (cfg.max_steps != 0 && step >= cfg.max_steps)) {
      if (summary.epochs < epoch && write) SaveCheckpoint(options.out_dir / "last", model);
      break;
    }
    if (ShouldHalt(history, cfg.halt_patience)) {
      summary.halted_early = true;
      break;
    }
  }
  return summary;
}

template class AdamW<float>;
template class AdamW<double>;
template Var<float> BatchLoss(const FlexioModel<float>&, std::span<const Scene>, std::size_t, std::vector<PitResult>*);
template Var<double> BatchLoss(const FlexioModel<double>&, std::span<const Scene>, std::size_t,
                               std::vector<PitResult>*);
template double EvaluateLoss(const FlexioModel<float>&, std::span<const Scene>, std::size_t);
template double EvaluateLoss(const FlexioModel<double>&, std::span<const Scene>, std::size_t);

}  // namespace flexio
