#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "flexio/stft.h"

namespace flexio {

// Sparse late-reflection tail added on top of the direct path.
struct ReverbSpec {
  bool enabled = false;
  std::size_t taps = 20;
  double decay_ms = 120.0;     // amplitude falls by 60 dB after this time
  double min_delay_ms = 5.0;
  double max_delay_ms = 80.0;
  double level = 0.5;          // amplitude of the earliest possible tap
};

// Everything needed to render one scene deterministically.
struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t speakers = 1;
  std::size_t channels = 1;
  std::size_t length = kSampleRate;
  double snr_db = std::numeric_limits<double>::infinity();  // +inf: no noise
  std::size_t ref_channel = 0;
  std::vector<std::vector<double>> delays;  // [speaker][channel], samples, >= 0
  std::vector<std::vector<double>> gains;   // [speaker][channel], > 0
  ReverbSpec reverb;

  void Validate() const;
};

// A rendered scene: the M-channel mixture and the anechoic reference-channel
// image of every speaker.
struct Scene {
  Waveform mixture;
  Waveform targets;
  std::uint64_t seed = 0;
  double snr_db = 0.0;
  std::size_t speakers() const { return targets.channels; }
  std::size_t channels() const { return mixture.channels; }
};

// Speech-like source: harmonics of a drifting fundamental, syllabic
// amplitude modulation and a weak band-limited noise floor; peak 0.5.
Waveform SynthSource(std::uint64_t seed, std::size_t length);

// Fractional delay by 64-tap windowed-sinc interpolation (exact shift for
// integer delays).
std::vector<double> FractionalDelay(std::span<const double> x, double delay);

// channel m = gain_m * delay(s, d_m), plus the sparse tail when enabled. The
// tail's random taps are drawn from `reverb_seed`.
Waveform Spatialize(std::span<const double> source, std::span<const double> delays,
                    std::span<const double> gains, const ReverbSpec& reverb,
                    std::uint64_t reverb_seed = 0);

// Sums spatial images and adds white noise so that
// 10 log10(sum_n |image_n|^2 / |noise|^2) = snr_db at the reference channel.
// `targets` are passed through as the scene's ground truth.
Scene Mix(std::span<const Waveform> images, const Waveform& targets, std::uint64_t noise_seed,
          double snr_db, std::size_t ref_channel);

// Draws delays/gains for a scene (reference channel delay 0, gain 1).
SceneSpec RandomSceneSpec(std::uint64_t seed, std::size_t speakers, std::size_t channels,
                          std::size_t length, double snr_db, double max_delay,
                          const ReverbSpec& reverb = {});

Scene RenderScene(const SceneSpec& spec);

// Measured SNR at the reference channel, treating mixture - sum(targets) as
// noise. Exact for anechoic scenes.
double MeasuredSnrDb(const Scene& scene, std::size_t ref_channel = 0);

struct ManifestRecord {
  std::string mixture_path;
  std::vector<std::string> source_paths;
  std::size_t speakers = 0;
  std::size_t channels = 0;
  double snr_db = 0.0;
  std::uint64_t seed = 0;
};

struct Manifest {
  std::filesystem::path root;  // relative paths resolve against this
  std::vector<ManifestRecord> records;
};

// JSON Lines, one record per line.
Manifest ReadManifest(const std::filesystem::path& path);
void WriteManifest(const std::filesystem::path& path, const Manifest& manifest);
Scene LoadScene(const Manifest& manifest, const ManifestRecord& record);
std::vector<Scene> LoadScenes(const Manifest& manifest);

struct SplitSpec {
  std::string name;
  std::size_t speakers = 1;
  std::size_t channels = 1;
  std::size_t count = 1;
};

struct DataConfig {
  std::uint64_t seed = 1;
  double length_seconds = 1.0;
  double snr_db_min = 5.0;
  double snr_db_max = 15.0;
  bool add_noise = true;
  double max_delay = 6.0;
  ReverbSpec reverb;
  std::vector<SplitSpec> splits;
};

// Scenes for one split entry; scene i uses a seed derived from
// (config seed, split name, N, M, i).
std::vector<SceneSpec> PlanSplit(const DataConfig& cfg, const SplitSpec& split);

// Renders every split to <out_dir>/<split name>/ with a manifest.jsonl each.
// Entries sharing a split name go into the same manifest.
void GenerateDataset(const DataConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace flexio
