#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace flexio {

inline constexpr int kSampleRate = 16000;

// M-channel time-domain audio, channel-major.
struct Waveform {
  std::size_t channels = 0;
  std::size_t length = 0;
  int sample_rate = kSampleRate;
  std::vector<double> samples;

  static Waveform Zeros(std::size_t channels, std::size_t length);
  double& at(std::size_t c, std::size_t i) { return samples[c * length + i]; }
  double at(std::size_t c, std::size_t i) const { return samples[c * length + i]; }
  std::span<double> channel(std::size_t c) { return {samples.data() + c * length, length}; }
  std::span<const double> channel(std::size_t c) const {
    return {samples.data() + c * length, length};
  }
  // Throws InvalidInput unless non-empty, consistently sized and finite.
  void Validate() const;
};

// Complex spectrogram [channels x frames x bins].
struct ComplexSpec {
  std::size_t channels = 0;
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::size_t window_len = 0;
  std::size_t hop = 0;
  std::vector<std::complex<double>> values;

  std::complex<double>& at(std::size_t c, std::size_t t, std::size_t f) {
    return values[(c * frames + t) * bins + f];
  }
  const std::complex<double>& at(std::size_t c, std::size_t t, std::size_t f) const {
    return values[(c * frames + t) * bins + f];
  }
  // Single-channel copy of channel c.
  ComplexSpec Channel(std::size_t c) const;
};

enum class WindowType { kSqrtHann, kHann, kRect };

WindowType ParseWindow(const std::string& name);
std::string WindowName(WindowType w);

struct StftConfig {
  std::size_t window_len = 256;
  std::size_t hop = 128;
  WindowType window = WindowType::kSqrtHann;

  std::size_t bins() const { return window_len / 2 + 1; }
  std::size_t pad() const { return window_len / 2; }
  // Frames produced for a signal of `length` samples under centre padding.
  std::size_t NumFrames(std::size_t length) const;
  std::vector<double> Window() const;
  // Throws ConfigError if the hop is out of range or the squared window does
  // not overlap-add to a constant.
  void Validate() const;
};

ComplexSpec Stft(const Waveform& w, const StftConfig& cfg);
Waveform Istft(const ComplexSpec& s, const StftConfig& cfg, std::size_t out_len);

// Transpose of Istft with respect to the real inner product on
// (re, im) pairs: <Istft(S), g> = <S, IstftAdjoint(g)>. Backpropagates a
// waveform gradient into the spectrogram.
ComplexSpec IstftAdjoint(const Waveform& grad, const StftConfig& cfg);

// Elementwise complex product of a [1 x T x F] mask with a single-channel
// mixture spectrogram.
ComplexSpec ApplyComplexMask(const ComplexSpec& mask, const ComplexSpec& mix);

}  // namespace flexio
