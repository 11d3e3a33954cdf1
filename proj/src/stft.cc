#include "flexio/stft.h"

#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>

#include <fftw3.h>

#include "flexio/errors.h"

namespace flexio {
namespace {

// fftw planning is not thread-safe; execution with new-array functions is.
std::mutex& PlannerMutex() {
  static std::mutex mu;
  return mu;
}

// Owns an r2c/c2r plan pair for one transform size plus aligned buffers.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    real_ = static_cast<double*>(fftw_malloc(sizeof(double) * n));
    cplx_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)));
    std::lock_guard<std::mutex> lock(PlannerMutex());
    forward_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), real_, cplx_, FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_c2r_1d(static_cast<int>(n), cplx_, real_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    std::lock_guard<std::mutex> lock(PlannerMutex());
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
    fftw_free(real_);
    fftw_free(cplx_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* real() { return real_; }
  std::complex<double>* spectrum() { return reinterpret_cast<std::complex<double>*>(cplx_); }
  void Forward() { fftw_execute(forward_); }
  // Unnormalised: returns n * x.
  void Inverse() { fftw_execute(inverse_); }

 private:
  std::size_t n_;
  double* real_;
  fftw_complex* cplx_;
  fftw_plan forward_;
  fftw_plan inverse_;
};

// numpy-style "reflect" index (edge sample not repeated), folded until valid.
std::size_t ReflectIndex(long i, std::size_t len) {
  if (len == 1) return 0;
  const long n = static_cast<long>(len);
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}

std::vector<double> OverlapEnvelope(const std::vector<double>& window, std::size_t hop,
                                    std::size_t frames) {
  const std::size_t win = window.size();
  std::vector<double> env((frames - 1) * hop + win, 0.0);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t n = 0; n < win; ++n) env[t * hop + n] += window[n] * window[n];
  }
  return env;
}

}  // namespace

Waveform Waveform::Zeros(std::size_t channels, std::size_t length) {
  Waveform w;
  w.channels = channels;
  w.length = length;
  w.samples.assign(channels * length, 0.0);
  return w;
}

void Waveform::Validate() const {
  if (channels == 0 || length == 0) throw InvalidInput("waveform is empty");
  if (samples.size() != channels * length) throw InvalidInput("waveform sample count mismatch");
  for (double v : samples) {
    if (!std::isfinite(v)) throw InvalidInput("waveform contains non-finite samples");
  }
}

ComplexSpec ComplexSpec::Channel(std::size_t c) const {
  if (c >= channels) throw InvalidInput("spectrogram channel out of range");
  ComplexSpec out = *this;
  out.channels = 1;
  const std::size_t per = frames * bins;
  out.values.assign(values.begin() + static_cast<long>(c * per),
                    values.begin() + static_cast<long>((c + 1) * per));
  return out;
}

WindowType ParseWindow(const std::string& name) {
  if (name == "sqrt_hann") return WindowType::kSqrtHann;
  if (name == "hann") return WindowType::kHann;
  if (name == "rect") return WindowType::kRect;
  throw ConfigError("unknown window: " + name);
}

std::string WindowName(WindowType w) {
  switch (w) {
    case WindowType::kSqrtHann:
      return "sqrt_hann";
    case WindowType::kHann:
      return "hann";
    case WindowType::kRect:
      return "rect";
  }
  return "unknown";
}

std::size_t StftConfig::NumFrames(std::size_t length) const {
  return (length + pad() + hop - 1) / hop;
}

std::vector<double> StftConfig::Window() const {
  std::vector<double> w(window_len);
  for (std::size_t n = 0; n < window_len; ++n) {
    // Periodic Hann.
    const double hann =
        0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                             static_cast<double>(window_len));
    switch (window) {
      case WindowType::kSqrtHann:
        w[n] = std::sqrt(hann);
        break;
      case WindowType::kHann:
        w[n] = hann;
        break;
      case WindowType::kRect:
        w[n] = 1.0;
        break;
    }
  }
  return w;
}

void StftConfig::Validate() const {
  if (window_len < 2 || window_len % 2 != 0) throw ConfigError("window_len must be even and >= 2");
  if (hop == 0 || hop > window_len) throw ConfigError("hop must satisfy 0 < hop <= window_len");
  const auto w = Window();
  double lo = 1e300, hi = 0.0;
  for (std::size_t n = 0; n < hop; ++n) {
    double acc = 0.0;
    for (std::size_t k = n; k < window_len; k += hop) acc += w[k] * w[k];
    lo = std::min(lo, acc);
    hi = std::max(hi, acc);
  }
  if (lo <= 0.0 || (hi - lo) > 1e-9 * hi) {
    throw ConfigError("window " + WindowName(window) + " does not overlap-add to a constant at hop " +
                      std::to_string(hop));
  }
}

ComplexSpec Stft(const Waveform& w, const StftConfig& cfg) {
  w.Validate();
  cfg.Validate();
  const std::size_t win = cfg.window_len;
  const std::size_t frames = cfg.NumFrames(w.length);
  const std::size_t bins = cfg.bins();
  const auto window = cfg.Window();
  ComplexSpec out;
  out.channels = w.channels;
  out.frames = frames;
  out.bins = bins;
  out.window_len = win;
  out.hop = cfg.hop;
  out.values.resize(w.channels * frames * bins);
  RealFft fft(win);
  const long pad = static_cast<long>(cfg.pad());
  for (std::size_t c = 0; c < w.channels; ++c) {
    const auto x = w.channel(c);
    for (std::size_t t = 0; t < frames; ++t) {
      const long start = static_cast<long>(t * cfg.hop) - pad;
      for (std::size_t n = 0; n < win; ++n) {
        fft.real()[n] = x[ReflectIndex(start + static_cast<long>(n), w.length)] * window[n];
      }
      fft.Forward();
      std::copy(fft.spectrum(), fft.spectrum() + bins, &out.at(c, t, 0));
    }
  }
  return out;
}

Waveform Istft(const ComplexSpec& s, const StftConfig& cfg, std::size_t out_len) {
  cfg.Validate();
  if (s.window_len != cfg.window_len || s.hop != cfg.hop || s.bins != cfg.bins()) {
    throw InvalidInput("istft: spectrogram was produced with a different configuration");
  }
  if (out_len == 0 || cfg.NumFrames(out_len) != s.frames) {
    throw InvalidInput("istft: output length " + std::to_string(out_len) +
                       " inconsistent with " + std::to_string(s.frames) + " frames");
  }
  const std::size_t win = cfg.window_len;
  const auto window = cfg.Window();
  const auto env = OverlapEnvelope(window, cfg.hop, s.frames);
  const std::size_t pad = cfg.pad();
  const double norm = 1.0 / static_cast<double>(win);
  Waveform out = Waveform::Zeros(s.channels, out_len);
  RealFft fft(win);
  std::vector<double> buf(env.size());
  for (std::size_t c = 0; c < s.channels; ++c) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (std::size_t t = 0; t < s.frames; ++t) {
      std::copy(&s.at(c, t, 0), &s.at(c, t, 0) + s.bins, fft.spectrum());
      fft.Inverse();
      for (std::size_t n = 0; n < win; ++n) buf[t * cfg.hop + n] += fft.real()[n] * norm * window[n];
    }
    for (std::size_t i = 0; i < out_len; ++i) {
      const double e = env[pad + i];
      out.at(c, i) = e > 1e-12 ? buf[pad + i] / e : 0.0;
    }
  }
  return out;
}

ComplexSpec IstftAdjoint(const Waveform& grad, const StftConfig& cfg) {
  cfg.Validate();
  const std::size_t win = cfg.window_len;
  const std::size_t frames = cfg.NumFrames(grad.length);
  const std::size_t bins = cfg.bins();
  const auto window = cfg.Window();
  const auto env = OverlapEnvelope(window, cfg.hop, frames);
  const std::size_t pad = cfg.pad();
  const double norm = 1.0 / static_cast<double>(win);
  ComplexSpec out;
  out.channels = grad.channels;
  out.frames = frames;
  out.bins = bins;
  out.window_len = win;
  out.hop = cfg.hop;
  out.values.resize(grad.channels * frames * bins);
  RealFft fft(win);
  std::vector<double> buf(env.size());
  for (std::size_t c = 0; c < grad.channels; ++c) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (std::size_t i = 0; i < grad.length; ++i) {
      const double e = env[pad + i];
      buf[pad + i] = e > 1e-12 ? grad.at(c, i) / e : 0.0;
    }
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t n = 0; n < win; ++n) fft.real()[n] = buf[t * cfg.hop + n] * window[n] * norm;
      fft.Forward();
      // c2r reads only the real part of DC and Nyquist and counts the other
      // bins twice (Hermitian completion).
      for (std::size_t k = 0; k < bins; ++k) {
        const bool edge = k == 0 || (k == bins - 1 && win % 2 == 0);
        const std::complex<double> v = fft.spectrum()[k];
        out.at(c, t, k) = edge ? std::complex<double>(v.real(), 0.0) : 2.0 * v;
      }
    }
  }
  return out;
}

ComplexSpec ApplyComplexMask(const ComplexSpec& mask, const ComplexSpec& mix) {
  if (mask.channels != 1 || mix.channels != 1 || mask.frames != mix.frames ||
      mask.bins != mix.bins) {
    throw InvalidInput("complex mask shape does not match the mixture spectrogram");
  }
  ComplexSpec out = mix;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = mask.values[i] * mix.values[i];
  return out;
}

}  // namespace flexio
