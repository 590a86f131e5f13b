#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace asd {

inline constexpr int kSampleRate = 16000;

// Mono PCM audio scaled to [-1, 1].
struct Waveform {
  std::vector<double> samples;
  int sample_rate = kSampleRate;
};

// Accepts RIFF/WAVE, 16-bit PCM, mono, 16 kHz. Anything else throws
// FormatError; stereo input is rejected rather than downmixed.
Waveform decode_wav(std::span<const std::byte> bytes);
Waveform read_wav(const std::filesystem::path& path);

// Writes 16-bit PCM mono. Samples are clipped to [-1, 1].
void write_wav(const std::filesystem::path& path, const Waveform& wave);

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);

}  // namespace asd
