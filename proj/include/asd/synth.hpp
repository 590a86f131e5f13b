#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "asd/wav.hpp"

namespace asd {

// A toy machine: a steady harmonic tone with a little background noise.
// Anomalous clips carry short broadband noise bursts on top.
struct SynthMachine {
  std::string type = "synth";
  double f0 = 220.0;  // Hz
};

struct SynthCorpusSpec {
  std::vector<SynthMachine> machines{SynthMachine{}};
  std::size_t train_normal = 60;  // per machine type
  std::size_t test_normal = 20;
  std::size_t test_anomaly = 20;
  double seconds = 2.0;
  double noise_level = 0.01;  // std of the background noise
  std::uint64_t seed = 0;
};

Waveform synth_clip(const SynthMachine& machine, bool anomalous, double seconds, double noise_level,
                    std::uint64_t seed);

// Writes WAV files under dir/<type>/{train,test}/ and dir/manifest.csv with
// relative paths; returns the manifest path.
std::filesystem::path write_synthetic_corpus(const std::filesystem::path& dir, const SynthCorpusSpec& spec);

}  // namespace asd
