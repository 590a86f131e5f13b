#include "asd/synth.hpp"

#include <cmath>
#include <numbers>

#include "asd/frontend.hpp"
#include "asd/rng.hpp"

namespace asd {

Waveform synth_clip(const SynthMachine& machine, bool anomalous, double seconds, double noise_level,
                    std::uint64_t seed) {
  Rng rng(seed);
  const auto n = static_cast<std::size_t>(std::lround(seconds * kSampleRate));
  Waveform w;
  w.samples.resize(n);

  constexpr double kAmplitudes[] = {0.30, 0.15, 0.08, 0.04};
  double phases[4];
  for (double& p : phases) p = 2.0 * std::numbers::pi * rng.uniform();
  const double two_pi_f0 = 2.0 * std::numbers::pi * machine.f0 / kSampleRate;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int h = 0; h < 4; ++h) s += kAmplitudes[h] * std::sin(two_pi_f0 * (h + 1) * static_cast<double>(i) + phases[h]);
    w.samples[i] = s + noise_level * rng.normal();
  }

  if (anomalous) {
    // 3 to 5 bursts of white noise, 40 to 120 ms each, with a short ramp.
    const std::size_t bursts = 3 + rng.below(3);
    for (std::size_t b = 0; b < bursts; ++b) {
      const auto len = static_cast<std::size_t>((0.04 + 0.08 * rng.uniform()) * kSampleRate);
      if (len >= n) continue;
      const std::size_t start = rng.below(n - len);
      const double amplitude = 0.15 + 0.15 * rng.uniform();
      for (std::size_t i = 0; i < len; ++i) {
        const double edge = std::min({1.0, static_cast<double>(i) / 80.0, static_cast<double>(len - i) / 80.0});
        w.samples[start + i] += edge * amplitude * rng.normal();
      }
    }
  }
  for (double& s : w.samples) s = std::clamp(s, -1.0, 1.0);
  return w;
}

std::filesystem::path write_synthetic_corpus(const std::filesystem::path& dir, const SynthCorpusSpec& spec) {
  std::string manifest = "path,machine_type,machine_id,split,label\n";
  std::uint64_t counter = 0;
  for (const auto& m : spec.machines) {
    auto emit = [&](const std::string& split, const std::string& label, std::size_t index) {
      const bool anomalous = label == "anomaly";
      const std::string name = label + "_id_00_" + std::to_string(100000000 + index).substr(1) + ".wav";
      const std::filesystem::path rel = std::filesystem::path(m.type) / split / name;
      const std::uint64_t clip_seed = spec.seed * 1000003 + counter++;
      write_wav(dir / rel, synth_clip(m, anomalous, spec.seconds, spec.noise_level, clip_seed));
      manifest += rel.generic_string() + "," + m.type + ",id_00," + split + "," + label + "\n";
    };
    std::filesystem::create_directories(dir / m.type / "train");
    std::filesystem::create_directories(dir / m.type / "test");
    for (std::size_t i = 0; i < spec.train_normal; ++i) emit("train", "normal", i);
    for (std::size_t i = 0; i < spec.test_normal; ++i) emit("test", "normal", i);
    for (std::size_t i = 0; i < spec.test_anomaly; ++i) emit("test", "anomaly", i);
  }
  const auto path = dir / "manifest.csv";
  write_file_atomic(path, manifest);
  return path;
}

}  // namespace asd
