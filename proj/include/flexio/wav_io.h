#pragma once

#include <filesystem>

#include "flexio/stft.h"

namespace flexio {

enum class WavFormat { kPcm16, kFloat32 };

// Reads a RIFF/WAVE file (PCM16 or IEEE float32). Files whose sample rate is
// not 16 kHz are rejected; resampling is not supported.
Waveform ReadWav(const std::filesystem::path& path);
void WriteWav(const std::filesystem::path& path, const Waveform& w,
              WavFormat format = WavFormat::kFloat32);

}  // namespace flexio
