#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flexio/loss.h"
#include "flexio/model.h"
#include "flexio/synth.h"

namespace flexio {

struct NmWeight {
  std::size_t speakers = 1;
  std::size_t channels = 1;
  double weight = 1.0;
};

struct TrainConfig {
  std::size_t batch_size = 4;
  double crop_seconds = 4.0;
  std::size_t warmup_steps = 500;
  double peak_lr = 1e-3;
  std::size_t plateau_patience = 5;
  std::size_t halt_patience = 10;
  double weight_decay = 0.01;
  std::size_t steps_per_epoch = 100;
  std::size_t max_epochs = 100;
  std::size_t max_steps = 0;  // 0: no cap
  double grad_clip = 5.0;     // global L2 norm; 0 disables
  std::uint64_t seed = 0;
  std::vector<NmWeight> nm_distribution{{2, 2, 1.0}};
  std::string train_split = "train";
  std::string val_split = "val";

  void Validate() const;
};

using SceneGroups = std::map<std::pair<std::size_t, std::size_t>, std::vector<const Scene*>>;

// Groups scenes by (N, M).
SceneGroups GroupScenes(std::span<const Scene> scenes);

struct Batch {
  std::size_t speakers = 0;
  std::size_t channels = 0;
  std::vector<Scene> scenes;  // cropped copies
};

// Draws (N, M) from the distribution, then batch_size scenes of that pair
// uniformly with replacement, each cropped to crop_seconds at a random offset
// (or to the shortest selected scene if that is shorter).
Batch SampleBatch(const SceneGroups& groups, const TrainConfig& cfg, std::mt19937_64& rng);

// Cropped copy of samples [offset, offset + length).
Scene CropScene(const Scene& scene, std::size_t offset, std::size_t length);

// Linear ramp 0 -> 1 over `warmup_steps`; `step` counts updates from 1.
double WarmupFactor(std::size_t step, std::size_t warmup_steps);
// Number of halvings implied by a per-epoch validation history: each run of
// `patience` epochs without a new best halves once and restarts the count.
std::size_t PlateauHalvings(std::span<const double> val_history, std::size_t patience);
// True once the best validation loss is `halt_patience` epochs old.
bool ShouldHalt(std::span<const double> val_history, std::size_t halt_patience);
double LearningRate(std::size_t step, std::span<const double> val_history, const TrainConfig& cfg);

// Adam with decoupled weight decay.
template <typename T>
class AdamW {
 public:
  AdamW(const ParameterStore<T>& params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);
  // Returns the global gradient norm before clipping.
  double Step(ParameterStore<T>& params, double lr, double grad_clip);
  std::size_t steps() const { return t_; }

 private:
  double wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Mean PIT negative-SNR over the scenes of one (N, M) group, with the graph
// attached for backpropagation.
template <typename T>
Var<T> BatchLoss(const FlexioModel<T>& model, std::span<const Scene> scenes, std::size_t ref_channel = 0,
                 std::vector<PitResult>* picks = nullptr);

// Mean per-scene PIT loss without gradients.
template <typename T>
double EvaluateLoss(const FlexioModel<T>& model, std::span<const Scene> scenes, std::size_t ref_channel = 0);

struct StepLog {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;  // NaN except on the last step of an epoch
};

struct TrainSummary {
  std::size_t steps = 0;
  std::size_t epochs = 0;
  double best_val_loss = 0.0;
  std::size_t best_epoch = 0;
  bool halted_early = false;
  bool stopped = false;  // ended by TrainOptions::stop
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::size_t ref_channel = 0;
  std::function<void(const StepLog&)> on_step;
  // Called after on_step; returning true ends training after this step.
  std::function<bool(const StepLog&)> stop;
};

// Trains in place. With an output directory, writes metrics.csv (one row
// per step), and checkpoints `last/` and `best/` after every epoch. A
// non-finite loss throws TrainingError naming the batch seed, after dumping
// it to nan_batch.json.
TrainSummary Train(FlexioModel<float>& model, std::span<const Scene> train, std::span<const Scene> val,
                   const TrainConfig& cfg, const TrainOptions& options = {});

// Seed of the RNG that draws the batch for `step`.
std::uint64_t BatchSeed(std::uint64_t seed, std::size_t step);

}  // namespace flexio
