#include <omp.h>

#include <malloc.h>

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "flexio/checkpoint.h"
#include "flexio/config.h"
#include "flexio/errors.h"
#include "flexio/metrics.h"
#include "flexio/model.h"
#include "flexio/synth.h"
#include "flexio/train.h"
#include "flexio/wav_io.h"

namespace {

using namespace flexio;

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

void ApplyThreadLimit() {
  const char* env = std::getenv("FLEXIO_NUM_THREADS");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError(std::string("FLEXIO_NUM_THREADS must be a positive integer, got '") + env + "'");
  omp_set_num_threads(static_cast<int>(n));
}

struct Options {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string config, out_dir, data_dir, checkpoint, input, manifest, report;
  std::size_t speakers = 1;
  std::size_t ref_channel = 0;
  bool ref_given = false;
};

int CmdSynth(const Options& o) {
  RunConfig cfg = LoadRunConfig(o.config);
  if (o.seed_given) cfg.data.seed = o.seed;
  GenerateDataset(cfg.data, o.out_dir);
  std::size_t total = 0;
  for (const SplitSpec& s : cfg.data.splits) total += s.count;
  std::cout << "wrote " << total << " scenes to " << o.out_dir << "\n";
  return kExitOk;
}

int CmdTrain(const Options& o) {
  RunConfig cfg = LoadRunConfig(o.config);
  if (o.seed_given) {
    cfg.train.seed = o.seed;
    cfg.model.init_seed = o.seed;
  }
  const std::filesystem::path data(o.data_dir);
  const Manifest train_manifest = ReadManifest(data / cfg.train.train_split / "manifest.jsonl");
  const std::vector<Scene> train = LoadScenes(train_manifest);
  std::vector<Scene> val;
  const auto val_path = data / cfg.train.val_split / "manifest.jsonl";
  if (std::filesystem::exists(val_path)) val = LoadScenes(ReadManifest(val_path));

  std::filesystem::create_directories(o.out_dir);
  WriteJsonFile(std::filesystem::path(o.out_dir) / "run_config.json", ToJson(cfg));
  FlexioModel<float> model(cfg.model);
  TrainOptions options;
  options.out_dir = o.out_dir;
  options.ref_channel = cfg.model.ref_channel;
  options.on_step = [](const StepLog& log) {
    if (!std::isnan(log.val_loss)) {
      std::printf("epoch %zu step %zu lr %.3g train %.3f val %.3f\n", log.epoch, log.step, log.lr, log.train_loss,
                  log.val_loss);
      std::fflush(stdout);
    }
  };
  const TrainSummary s = Train(model, train, val, cfg.train, options);
  std::printf("trained %zu steps over %zu epochs; best val %.3f dB at epoch %zu%s\n", s.steps, s.epochs,
              s.best_val_loss, s.best_epoch, s.halted_early ? " (halted early)" : "");
  return kExitOk;
}

int CmdSeparate(const Options& o) {
  const FlexioModel<float> model = LoadCheckpoint<float>(o.checkpoint);
  const Waveform mixture = ReadWav(o.input);
  const std::size_t ref = o.ref_given ? o.ref_channel : model.config().ref_channel;
  const SeparationResult out = model.Separate(mixture, o.speakers, ref);
  const std::filesystem::path dir(o.out_dir);
  std::filesystem::create_directories(dir);
  for (std::size_t n = 0; n < o.speakers; ++n) {
    Waveform mono = Waveform::Zeros(1, out.sources.length);
    std::ranges::copy(out.sources.channel(n), mono.samples.begin());
    const auto path = dir / ("speaker" + std::to_string(n) + ".wav");
    WriteWav(path, mono, WavFormat::kFloat32);
    std::cout << path.string() << "\n";
  }
  return kExitOk;
}

int CmdEvaluate(const Options& o) {
  const FlexioModel<float> model = LoadCheckpoint<float>(o.checkpoint);
  const Manifest manifest = ReadManifest(o.manifest);
  const std::vector<EvalRow> rows = Evaluate(model, manifest, o.ref_channel);
  WriteEvalCsv(o.report, rows);
  std::printf("%3s %3s %6s %12s %12s\n", "N", "M", "count", "SI-SDR", "SI-SDRi");
  for (const EvalRow& r : rows) {
    std::printf("%3zu %3zu %6zu %12.3f %12.3f\n", r.speakers, r.channels, r.count, r.mean_sisdr, r.mean_sisdri);
  }
  return kExitOk;
}

// Module key: first path component, plus the block index and sub-module for
// repeated blocks ("cross_prompt.0.time").
std::string ModuleKey(const std::string& name) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = name.find('.', start);
    parts.push_back(name.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if ((parts[0] == "cross_prompt" || parts[0] == "tse") && parts.size() > 2) {
    return parts[0] + "." + parts[1] + "." + parts[2];
  }
  return parts[0];
}

int CmdInspect(const Options& o) {
  const std::filesystem::path path(o.checkpoint);
  ModelConfig cfg;
  bool from_checkpoint = std::filesystem::is_directory(path);
  if (from_checkpoint) {
    cfg = LoadCheckpointConfig(path);
  } else {
    cfg = LoadRunConfig(path).model;
  }
  const FlexioModel<float> model = from_checkpoint ? LoadCheckpoint<float>(path) : FlexioModel<float>(cfg);
  std::cout << ToJson(cfg).dump(2) << "\n";
  const auto& params = model.params();
  std::map<std::string, std::size_t> modules;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string key = ModuleKey(params.names()[i]);
    if (!modules.count(key)) order.push_back(key);
    modules[key] += params.vars()[i].value().size();
  }
  std::printf("%-32s %12s\n", "module", "parameters");
  for (const std::string& key : order) std::printf("%-32s %12zu\n", key.c_str(), modules[key]);
  const std::size_t total = params.NumElements();
  std::printf("%-32s %12zu (%.3f M)\n", "total", total, static_cast<double>(total) / 1e6);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  // Recycle large tensor buffers instead of mapping fresh pages per step.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
  CLI::App app{"Prompt-conditional multi-channel speech separation"};
  app.require_subcommand(1);
  Options o;
  auto* seed = app.add_option("--seed", o.seed, "Seed for data generation, initialisation and batch sampling");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with manifests");
  synth->add_option("config", o.config, "Run configuration (JSON)")->required();
  synth->add_option("out_dir", o.out_dir, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("config", o.config, "Run configuration (JSON)")->required();
  train->add_option("data_dir", o.data_dir, "Dataset directory written by synth")->required();
  train->add_option("out_dir", o.out_dir, "Directory for checkpoints and metrics.csv")->required();

  auto* separate = app.add_subcommand("separate", "Separate a multichannel WAV file");
  separate->add_option("checkpoint", o.checkpoint, "Checkpoint directory")->required();
  separate->add_option("in_wav", o.input, "Input mixture (16 kHz)")->required();
  separate->add_option("out_dir", o.out_dir, "Directory for per-speaker WAV files")->required();
  separate->add_option("--num-speakers", o.speakers, "Number of output streams (prompts)")->required();
  auto* ref = separate->add_option("--ref-channel", o.ref_channel, "Reference microphone index");

  auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on a manifest");
  evaluate->add_option("checkpoint", o.checkpoint, "Checkpoint directory")->required();
  evaluate->add_option("manifest", o.manifest, "manifest.jsonl")->required();
  evaluate->add_option("report_csv", o.report, "Output CSV")->required();
  evaluate->add_option("--ref-channel", o.ref_channel, "Reference microphone index");

  auto* inspect = app.add_subcommand("inspect", "Print configuration and parameter counts");
  inspect->add_option("checkpoint", o.checkpoint, "Checkpoint directory or run configuration JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  o.seed_given = seed->count() > 0;
  o.ref_given = ref->count() > 0;

  try {
    ApplyThreadLimit();
    if (*synth) return CmdSynth(o);
    if (*train) return CmdTrain(o);
    if (*separate) return CmdSeparate(o);
    if (*evaluate) return CmdEvaluate(o);
    if (*inspect) return CmdInspect(o);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InvalidInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
