#include "flexio/synth.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <random>

#include "flexio/errors.h"
#include "flexio/seed.h"
#include "flexio/wav_io.h"
#include "json.hpp"

namespace flexio {
namespace {

using nlohmann::json;

constexpr int kSincTaps = 64;
constexpr double kPi = std::numbers::pi;

double Energy(std::span<const double> x) {
  double e = 0.0;
  for (double v : x) e += v * v;
  return e;
}

// Second-order resonator band-pass, run forward once.
std::vector<double> BandPass(std::span<const double> x, double centre_hz, double q) {
  const double w0 = 2.0 * kPi * centre_hz / kSampleRate;
  const double alpha = std::sin(w0) / (2.0 * q);
  const double a0 = 1.0 + alpha;
  const double b0 = alpha / a0, b2 = -alpha / a0;
  const double a1 = -2.0 * std::cos(w0) / a0, a2 = (1.0 - alpha) / a0;
  std::vector<double> y(x.size());
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = b0 * x[i] + b2 * x2 - a1 * y1 - a2 * y2;
    x2 = x1;
    x1 = x[i];
    y2 = y1;
    y1 = v;
    y[i] = v;
  }
  return y;
}

std::vector<double> SparseTail(std::span<const double> x, const ReverbSpec& reverb, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> when(reverb.min_delay_ms, reverb.max_delay_ms);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> y(x.size(), 0.0);
  const double rate = std::log(1000.0) / reverb.decay_ms;  // -60 dB at decay_ms
  for (std::size_t k = 0; k < reverb.taps; ++k) {
    const double ms = when(rng);
    const auto lag = static_cast<std::size_t>(std::lround(ms * kSampleRate / 1000.0));
    const double amp = reverb.level * std::exp(-rate * (ms - reverb.min_delay_ms)) * (sign(rng) ? 1.0 : -1.0);
    for (std::size_t i = lag; i < x.size(); ++i) y[i] += amp * x[i - lag];
  }
  return y;
}

json RecordToJson(const ManifestRecord& r) {
  json j;
  j["mixture_path"] = r.mixture_path;
  j["source_paths"] = r.source_paths;
  j["N"] = r.speakers;
  j["M"] = r.channels;
  if (std::isfinite(r.snr_db)) {
    j["snr_db"] = r.snr_db;
  } else {
    j["snr_db"] = nullptr;
  }
  j["seed"] = r.seed;
  return j;
}

ManifestRecord RecordFromJson(const json& j) {
  ManifestRecord r;
  try {
    r.mixture_path = j.at("mixture_path").get<std::string>();
    r.source_paths = j.at("source_paths").get<std::vector<std::string>>();
    r.speakers = j.at("N").get<std::size_t>();
    r.channels = j.at("M").get<std::size_t>();
    const json& snr = j.at("snr_db");
    r.snr_db = snr.is_null() ? std::numeric_limits<double>::infinity() : snr.get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed manifest record: ") + e.what());
  }
  if (r.source_paths.size() != r.speakers) {
    throw DataError("manifest record lists " + std::to_string(r.source_paths.size()) + " sources for N=" +
                    std::to_string(r.speakers));
  }
  return r;
}

std::string SceneStem(const SplitSpec& split, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "n%zum%zu_%05zu", split.speakers, split.channels, i);
  return buf;
}

}  // namespace

void SceneSpec::Validate() const {
  if (speakers == 0 || channels == 0 || length == 0) throw InvalidInput("scene needs N, M and length >= 1");
  if (ref_channel >= channels) throw ConfigError("reference channel out of range: " + std::to_string(ref_channel));
  if (delays.size() != speakers || gains.size() != speakers) throw InvalidInput("scene delays/gains need N rows");
  for (std::size_t n = 0; n < speakers; ++n) {
    if (delays[n].size() != channels || gains[n].size() != channels) {
      throw InvalidInput("scene delays/gains need M columns");
    }
    for (std::size_t m = 0; m < channels; ++m) {
      if (!(delays[n][m] >= 0.0)) throw InvalidInput("scene delays must be >= 0");
      if (!(gains[n][m] > 0.0)) throw InvalidInput("scene gains must be > 0");
    }
    if (delays[n][ref_channel] != 0.0) throw InvalidInput("reference-channel delay must be 0");
  }
  if (std::isnan(snr_db)) throw InvalidInput("scene SNR is NaN");
}

Waveform SynthSource(std::uint64_t seed, std::size_t length) {
  if (length == 0) throw InvalidInput("source length must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const double f0_centre = 80.0 * std::pow(300.0 / 80.0, 0.15 + 0.7 * u(rng));
  const double drift_rate = 0.3 + 1.2 * u(rng);
  const double drift_depth = 0.05 + 0.15 * u(rng);
  const double drift_phase = 2.0 * kPi * u(rng);
  const int harmonics = 3 + static_cast<int>(rng() % 6);
  std::vector<double> amps(harmonics), phases(harmonics);
  for (int k = 0; k < harmonics; ++k) {
    amps[k] = (0.5 + 0.5 * u(rng)) / (k + 1);
    phases[k] = 2.0 * kPi * u(rng);
  }
  const double am_rate = 2.0 + 6.0 * u(rng);
  const double am_phase = 2.0 * kPi * u(rng);

  std::vector<double> voiced(length);
  double phase = 0.0;
  for (std::size_t i = 0; i < length; ++i) {
    const double t = static_cast<double>(i) / kSampleRate;
    double f0 = f0_centre * (1.0 + drift_depth * std::sin(2.0 * kPi * drift_rate * t + drift_phase));
    f0 = std::clamp(f0, 80.0, 300.0);
    phase += 2.0 * kPi * f0 / kSampleRate;
    double v = 0.0;
    for (int k = 0; k < harmonics; ++k) {
      if ((k + 1) * f0 < 0.45 * kSampleRate) v += amps[k] * std::sin((k + 1) * phase + phases[k]);
    }
    const double env = 0.5 - 0.5 * std::cos(2.0 * kPi * am_rate * t + am_phase);
    voiced[i] = v * (0.1 + 0.9 * env * env);
  }

  std::vector<double> white(length);
  for (double& v : white) v = gauss(rng);
  std::vector<double> noise = BandPass(white, 500.0 + 2500.0 * u(rng), 1.0);
  const double ev = Energy(voiced), en = Energy(noise);
  const double noise_scale = en > 0.0 ? std::sqrt(ev / en * 0.01) : 0.0;

  Waveform w = Waveform::Zeros(1, length);
  double peak = 0.0;
  for (std::size_t i = 0; i < length; ++i) {
    w.samples[i] = voiced[i] + noise_scale * noise[i];
    peak = std::max(peak, std::abs(w.samples[i]));
  }
  if (peak > 0.0) {
    for (double& v : w.samples) v *= 0.5 / peak;
  }
  return w;
}

std::vector<double> FractionalDelay(std::span<const double> x, double delay) {
  if (!(delay >= 0.0) || !std::isfinite(delay)) throw InvalidInput("delay must be finite and >= 0");
  const std::size_t n = x.size();
  std::vector<double> y(n, 0.0);
  const double whole = std::floor(delay);
  const double frac = delay - whole;
  const auto shift = static_cast<std::ptrdiff_t>(whole);
  if (frac == 0.0) {
    for (std::size_t i = static_cast<std::size_t>(std::min<std::ptrdiff_t>(shift, n)); i < n; ++i) {
      y[i] = x[i - shift];
    }
    return y;
  }
  // y[i] = sum_k x[i - shift - k] h[k], h[k] = sinc(k - frac) * blackman window.
  constexpr int half = kSincTaps / 2;
  std::vector<double> h(kSincTaps);
  for (int j = 0; j < kSincTaps; ++j) {
    const double k = j - half + 1;
    const double arg = k - frac;
    const double sinc = std::sin(kPi * arg) / (kPi * arg);
    const double pos = (arg + half) / kSincTaps;  // in (0, 1)
    const double win = 0.42 - 0.5 * std::cos(2.0 * kPi * pos) + 0.08 * std::cos(4.0 * kPi * pos);
    h[j] = sinc * win;
  }
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int j = 0; j < kSincTaps; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i) - shift - (j - half + 1);
      if (src >= 0 && src < static_cast<std::ptrdiff_t>(n)) acc += x[src] * h[j];
    }
    y[i] = acc;
  }
  return y;
}

Waveform Spatialize(std::span<const double> source, std::span<const double> delays,
                    std::span<const double> gains, const ReverbSpec& reverb, std::uint64_t reverb_seed) {
  if (source.empty()) throw InvalidInput("cannot spatialize an empty source");
  if (delays.size() != gains.size() || delays.empty()) {
    throw InvalidInput("spatialize needs one delay and one gain per channel");
  }
  const std::size_t channels = delays.size();
  Waveform out = Waveform::Zeros(channels, source.size());
  for (std::size_t m = 0; m < channels; ++m) {
    if (!(gains[m] > 0.0)) throw InvalidInput("channel gains must be > 0");
    std::vector<double> y = FractionalDelay(source, delays[m]);
    if (reverb.enabled) {
      const std::vector<double> tail = SparseTail(y, reverb, DeriveSeed(reverb_seed, m));
      for (std::size_t i = 0; i < y.size(); ++i) y[i] += tail[i];
    }
    auto dst = out.channel(m);
    for (std::size_t i = 0; i < y.size(); ++i) dst[i] = gains[m] * y[i];
  }
  return out;
}

Scene Mix(std::span<const Waveform> images, const Waveform& targets, std::uint64_t noise_seed, double snr_db,
          std::size_t ref_channel) {
  if (images.empty()) throw InvalidInput("mix needs at least one source image");
  const std::size_t channels = images[0].channels, length = images[0].length;
  for (const Waveform& w : images) {
    if (w.channels != channels || w.length != length) throw InvalidInput("source images differ in shape");
  }
  if (ref_channel >= channels) throw ConfigError("reference channel out of range: " + std::to_string(ref_channel));
  if (targets.channels != images.size() || targets.length != length) {
    throw InvalidInput("targets must hold one reference image per source");
  }
  Scene scene;
  scene.mixture = Waveform::Zeros(channels, length);
  double signal = 0.0;
  for (const Waveform& w : images) {
    for (std::size_t i = 0; i < w.samples.size(); ++i) scene.mixture.samples[i] += w.samples[i];
    signal += Energy(w.channel(ref_channel));
  }
  if (std::isfinite(snr_db)) {
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Waveform noise = Waveform::Zeros(channels, length);
    for (double& v : noise.samples) v = gauss(rng);
    const double target = signal / std::pow(10.0, snr_db / 10.0);
    const double scale = std::sqrt(target / Energy(noise.channel(ref_channel)));
    for (std::size_t i = 0; i < noise.samples.size(); ++i) scene.mixture.samples[i] += scale * noise.samples[i];
  }
  scene.targets = targets;
  scene.snr_db = snr_db;
  return scene;
}

SceneSpec RandomSceneSpec(std::uint64_t seed, std::size_t speakers, std::size_t channels, std::size_t length,
                          double snr_db, double max_delay, const ReverbSpec& reverb) {
  SceneSpec spec;
  spec.seed = seed;
  spec.speakers = speakers;
  spec.channels = channels;
  spec.length = length;
  spec.snr_db = snr_db;
  spec.reverb = reverb;
  std::mt19937_64 rng(DeriveSeed(seed, 0));
  std::uniform_real_distribution<double> delay(0.0, max_delay);
  std::uniform_real_distribution<double> gain(0.6, 1.0);
  spec.delays.assign(speakers, std::vector<double>(channels, 0.0));
  spec.gains.assign(speakers, std::vector<double>(channels, 1.0));
  for (std::size_t n = 0; n < speakers; ++n) {
    for (std::size_t m = 0; m < channels; ++m) {
      if (m == spec.ref_channel) continue;
      spec.delays[n][m] = delay(rng);
      spec.gains[n][m] = gain(rng);
    }
  }
  spec.Validate();
  return spec;
}

Scene RenderScene(const SceneSpec& spec) {
  spec.Validate();
  std::vector<Waveform> images;
  Waveform targets = Waveform::Zeros(spec.speakers, spec.length);
  ReverbSpec dry;
  for (std::size_t n = 0; n < spec.speakers; ++n) {
    const Waveform src = SynthSource(DeriveSeed(spec.seed, 1 + n), spec.length);
    images.push_back(Spatialize(src.channel(0), spec.delays[n], spec.gains[n], spec.reverb,
                                DeriveSeed(spec.seed, 1000 + n)));
    const Waveform anechoic = Spatialize(src.channel(0), spec.delays[n], spec.gains[n], dry);
    std::ranges::copy(anechoic.channel(spec.ref_channel), targets.channel(n).begin());
  }
  Scene scene = Mix(images, targets, DeriveSeed(spec.seed, 999), spec.snr_db, spec.ref_channel);
  scene.seed = spec.seed;
  return scene;
}

double MeasuredSnrDb(const Scene& scene, std::size_t ref_channel) {
  if (ref_channel >= scene.channels()) throw ConfigError("reference channel out of range: " + std::to_string(ref_channel));
  const auto mix = scene.mixture.channel(ref_channel);
  double signal = 0.0;
  std::vector<double> residual(mix.begin(), mix.end());
  for (std::size_t n = 0; n < scene.speakers(); ++n) {
    const auto t = scene.targets.channel(n);
    signal += Energy(t);
    for (std::size_t i = 0; i < residual.size(); ++i) residual[i] -= t[i];
  }
  const double noise = Energy(residual);
  if (noise == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(signal / noise);
}

Manifest ReadManifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path.string());
  Manifest manifest;
  manifest.root = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    manifest.records.push_back(RecordFromJson(j));
  }
  return manifest;
}

void WriteManifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest: " + path.string());
  for (const ManifestRecord& r : manifest.records) out << RecordToJson(r).dump() << '\n';
}

Scene LoadScene(const Manifest& manifest, const ManifestRecord& record) {
  Scene scene;
  scene.mixture = ReadWav(manifest.root / record.mixture_path);
  if (scene.mixture.channels != record.channels) {
    throw DataError(record.mixture_path + ": has " + std::to_string(scene.mixture.channels) +
                    " channels, manifest says M=" + std::to_string(record.channels));
  }
  scene.targets = Waveform::Zeros(record.speakers, scene.mixture.length);
  for (std::size_t n = 0; n < record.speakers; ++n) {
    const Waveform src = ReadWav(manifest.root / record.source_paths[n]);
    if (src.channels != 1 || src.length != scene.mixture.length) {
      throw DataError(record.source_paths[n] + ": source must be mono and as long as the mixture");
    }
    std::ranges::copy(src.samples, scene.targets.channel(n).begin());
  }
  scene.seed = record.seed;
  scene.snr_db = record.snr_db;
  return scene;
}

std::vector<Scene> LoadScenes(const Manifest& manifest) {
  std::vector<Scene> scenes;
  scenes.reserve(manifest.records.size());
  for (const ManifestRecord& r : manifest.records) scenes.push_back(LoadScene(manifest, r));
  return scenes;
}

std::vector<SceneSpec> PlanSplit(const DataConfig& cfg, const SplitSpec& split) {
  if (split.speakers == 0 || split.channels == 0) throw ConfigError("split " + split.name + " needs N, M >= 1");
  if (!(cfg.length_seconds > 0.0)) throw ConfigError("data length_seconds must be > 0");
  if (cfg.snr_db_max < cfg.snr_db_min) throw ConfigError("data snr_db_max < snr_db_min");
  if (cfg.max_delay < 0.0) throw ConfigError("data max_delay must be >= 0");
  const auto length = static_cast<std::size_t>(std::lround(cfg.length_seconds * kSampleRate));
  const std::uint64_t base = DeriveSeed(DeriveSeed(DeriveSeed(cfg.seed, HashName(split.name)), split.speakers),
                                        split.channels);
  std::vector<SceneSpec> specs;
  specs.reserve(split.count);
  for (std::size_t i = 0; i < split.count; ++i) {
    const std::uint64_t seed = DeriveSeed(base, i);
    double snr = std::numeric_limits<double>::infinity();
    if (cfg.add_noise) {
      std::mt19937_64 rng(DeriveSeed(seed, 7));
      snr = cfg.snr_db_min + (cfg.snr_db_max - cfg.snr_db_min) * std::uniform_real_distribution<double>(0, 1)(rng);
    }
    specs.push_back(RandomSceneSpec(seed, split.speakers, split.channels, length, snr, cfg.max_delay, cfg.reverb));
  }
  return specs;
}

void GenerateDataset(const DataConfig& cfg, const std::filesystem::path& out_dir) {
  if (cfg.splits.empty()) throw ConfigError("data config lists no splits");
  std::map<std::string, Manifest> manifests;
  for (const SplitSpec& split : cfg.splits) {
    const std::filesystem::path dir = out_dir / split.name;
    std::filesystem::create_directories(dir);
    const std::vector<SceneSpec> specs = PlanSplit(cfg, split);
    std::vector<ManifestRecord> records(specs.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < specs.size(); ++i) {
      const Scene scene = RenderScene(specs[i]);
      const std::string stem = SceneStem(split, i);
      ManifestRecord& r = records[i];
      r.mixture_path = stem + "_mix.wav";
      WriteWav(dir / r.mixture_path, scene.mixture, WavFormat::kFloat32);
      for (std::size_t n = 0; n < scene.speakers(); ++n) {
        r.source_paths.push_back(stem + "_s" + std::to_string(n) + ".wav");
        Waveform mono = Waveform::Zeros(1, scene.targets.length);
        std::ranges::copy(scene.targets.channel(n), mono.samples.begin());
        WriteWav(dir / r.source_paths.back(), mono, WavFormat::kFloat32);
      }
      r.speakers = scene.speakers();
      r.channels = scene.channels();
      r.snr_db = scene.snr_db;
      r.seed = scene.seed;
    }
    Manifest& m = manifests[split.name];
    m.root = dir;
    m.records.insert(m.records.end(), records.begin(), records.end());
  }
  for (const auto& [name, manifest] : manifests) WriteManifest(manifest.root / "manifest.jsonl", manifest);
}

}  // namespace flexio
