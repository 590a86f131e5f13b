#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <random>

#include "asd/errors.hpp"
#include "asd/frontend.hpp"
#include "asd/wav.hpp"
#include "doctest.h"

using namespace asd;

namespace {

std::size_t enumerate_windows(std::size_t n, std::size_t window, std::size_t hop) {
  std::size_t count = 0;
  for (std::size_t start = 0; start + window <= n; start += hop) ++count;
  return count;
}

Waveform sine(double hz, std::size_t n, double amplitude = 0.5) {
  Waveform w;
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    w.samples[i] = amplitude * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / 16000.0);
  }
  return w;
}

Waveform noise(std::size_t n, unsigned seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> dist(-0.5, 0.5);
  Waveform w;
  w.samples.resize(n);
  for (auto& s : w.samples) s = dist(gen);
  return w;
}

Spectrogram random_spec(std::size_t f, std::size_t t, unsigned seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist(-3.0, 2.0);
  Spectrogram s;
  s.n_bins = f;
  s.n_frames = t;
  s.values.resize(f * t);
  for (auto& v : s.values) v = dist(gen);
  return s;
}

// Little-endian WAV header for arbitrary format fields.
std::vector<std::byte> wav_bytes(std::uint16_t channels, std::uint32_t rate, std::uint16_t bits,
                                 std::size_t frames) {
  std::vector<std::byte> out;
  auto put = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const std::byte*>(p);
    out.insert(out.end(), b, b + n);
  };
  auto u32 = [&](std::uint32_t v) { put(&v, 4); };
  auto u16 = [&](std::uint16_t v) { put(&v, 2); };
  const std::uint32_t data_size = static_cast<std::uint32_t>(frames * channels * (bits / 8));
  put("RIFF", 4);
  u32(36 + data_size);
  put("WAVE", 4);
  put("fmt ", 4);
  u32(16);
  u16(1);
  u16(channels);
  u32(rate);
  u32(rate * channels * (bits / 8));
  u16(static_cast<std::uint16_t>(channels * (bits / 8)));
  u16(bits);
  put("data", 4);
  u32(data_size);
  out.resize(out.size() + data_size, std::byte{0});
  return out;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("asd_test_frontend_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("frame count examples") {
  CHECK(frame_count(160000, 640, 320) == 499);
  CHECK(frame_count(640, 640, 320) == 1);
  Waveform w;
  w.samples.assign(639, 0.0);
  CHECK_THROWS_AS(frame_signal(w, 640, 320), ClipTooShortError);

  w.samples.assign(1600, 0.0);
  for (std::size_t i = 0; i < w.samples.size(); ++i) w.samples[i] = static_cast<double>(i);
  const auto frames = frame_signal(w, 640, 320);
  REQUIRE(frames.size() == 4);
  for (std::size_t k = 0; k < frames.size(); ++k) {
    CHECK(frames[k].size() == 640);
    CHECK(frames[k][0] == static_cast<double>(k * 320));
  }
}

TEST_CASE("frame count agrees with brute-force enumeration") {
  std::mt19937_64 gen(7);
  std::uniform_int_distribution<std::size_t> dist(640, 1000000);
  for (int i = 0; i < 2000; ++i) {
    const std::size_t n = dist(gen);
    CHECK(frame_count(n, 640, 320) == enumerate_windows(n, 640, 320));
    CHECK(frame_count(n, 1024, 512) == enumerate_windows(n, 1024, 512));
  }
}

TEST_CASE("gammatone bank geometry") {
  const auto bank = build_gammatone_bank(64, 50.0, 8000.0, 1024, 16000);
  REQUIRE(bank.center_freqs.size() == 64);
  REQUIRE(bank.weights.size() == 64 * 513);
  CHECK(bank.center_freqs.front() == doctest::Approx(50.0).epsilon(1e-9));
  CHECK(bank.center_freqs.back() == doctest::Approx(8000.0).epsilon(1e-9));
  for (std::size_t i = 0; i < 64; ++i) {
    if (i > 0) CHECK(bank.center_freqs[i] > bank.center_freqs[i - 1]);
    CHECK(bank.center_freqs[i] >= 50.0 - 1e-9);
    CHECK(bank.center_freqs[i] <= 8000.0 + 1e-9);
    const auto row = bank.row(i);
    CHECK(*std::max_element(row.begin(), row.end()) == doctest::Approx(1.0));
    CHECK(*std::min_element(row.begin(), row.end()) >= 0.0);
  }
  // Uniform spacing on the ERB-number scale.
  const double step = hz_to_erb_rate(bank.center_freqs[1]) - hz_to_erb_rate(bank.center_freqs[0]);
  for (std::size_t i = 1; i < 64; ++i) {
    CHECK(hz_to_erb_rate(bank.center_freqs[i]) - hz_to_erb_rate(bank.center_freqs[i - 1]) ==
          doctest::Approx(step).epsilon(1e-9));
  }
  for (std::size_t i = 0; i + 1 < 64; ++i) {
    const auto a = bank.row(i);
    const auto b = bank.row(i + 1);
    double dot = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
    CHECK(dot > 0.0);
  }
}

TEST_CASE("single gammatone filter peaks at its center") {
  const auto bank = build_gammatone_bank(1, 1000.0, 2000.0, 1024, 16000);
  REQUIRE(bank.center_freqs.size() == 1);
  const auto row = bank.row(0);
  const auto peak = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  const double bin_hz = 16000.0 / 1024.0;
  CHECK(std::abs(static_cast<double>(peak) * bin_hz - bank.center_freqs[0]) <= bin_hz / 2.0 + 1e-9);
}

TEST_CASE("bank parameter errors") {
  CHECK_THROWS_AS(build_gammatone_bank(64, 50.0, 8001.0, 1024, 16000), ConfigError);
  CHECK_THROWS_AS(build_gammatone_bank(0, 50.0, 8000.0, 1024, 16000), ConfigError);
  CHECK_THROWS_AS(build_gammatone_bank(64, 0.0, 8000.0, 1024, 16000), ConfigError);
  CHECK_THROWS_AS(build_gammatone_bank(64, 500.0, 400.0, 1024, 16000), ConfigError);
}

TEST_CASE("mel bank is unit-peak triangles") {
  const auto bank = build_mel_bank(128, 0.0, 8000.0, 1024, 16000);
  REQUIRE(bank.center_freqs.size() == 128);
  for (std::size_t i = 0; i < 128; ++i) {
    if (i > 0) CHECK(bank.center_freqs[i] > bank.center_freqs[i - 1]);
    const auto row = bank.row(i);
    const double peak = *std::max_element(row.begin(), row.end());
    CHECK(peak > 0.0);
    CHECK(peak <= 1.0 + 1e-12);
  }
}

TEST_CASE("spectrogram shape and silent input") {
  FeatureExtractor fx(FrontendConfig::gammatone());
  Waveform silent;
  silent.samples.assign(160000, 0.0);
  const auto spec = fx.extract(silent);
  CHECK(spec.n_bins == 64);
  CHECK(spec.n_frames == 499);
  CHECK(spec.tag == FrontendTag::gammatone64);
  for (double v : spec.values) CHECK(v == std::log(kLogFloor));
}

TEST_CASE("1 kHz sine lands in the band nearest 1 kHz") {
  FeatureExtractor fx(FrontendConfig::gammatone());
  const auto& centers = fx.bank().center_freqs;
  std::size_t nearest = 0;
  for (std::size_t i = 1; i < centers.size(); ++i) {
    if (std::abs(centers[i] - 1000.0) < std::abs(centers[nearest] - 1000.0)) nearest = i;
  }
  const auto spec = fx.extract(sine(1000.0, 16000));
  for (std::size_t t = 0; t < spec.n_frames; ++t) {
    std::size_t best = 0;
    for (std::size_t f = 1; f < spec.n_bins; ++f) {
      if (spec.at(f, t) > spec.at(best, t)) best = f;
    }
    CHECK(best == nearest);
  }
}

TEST_CASE("band energies match a naive DFT") {
  FeatureExtractor fx(FrontendConfig::gammatone());
  const Waveform w = noise(640 + 2 * 320, 3);
  const auto energies = fx.band_energies(w);
  REQUIRE(energies.n_frames == 3);
  for (double v : energies.values) CHECK(v >= 0.0);

  const std::size_t n_fft = 1024;
  for (std::size_t t = 0; t < 3; ++t) {
    std::vector<double> power(n_fft / 2 + 1);
    for (std::size_t k = 0; k < power.size(); ++k) {
      std::complex<double> acc = 0.0;
      for (std::size_t n = 0; n < 640; ++n) {
        const double hann = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / 640.0);
        const double angle = -2.0 * std::numbers::pi * static_cast<double>(k * n) / static_cast<double>(n_fft);
        acc += w.samples[t * 320 + n] * hann * std::polar(1.0, angle);
      }
      power[k] = std::norm(acc);
    }
    for (std::size_t f = 0; f < 64; ++f) {
      const auto row = fx.bank().row(f);
      double e = 0.0;
      for (std::size_t k = 0; k < power.size(); ++k) e += row[k] * power[k];
      CHECK(energies.at(f, t) == doctest::Approx(e).epsilon(1e-9));
    }
  }
}

TEST_CASE("extraction is deterministic") {
  FeatureExtractor a(FrontendConfig::gammatone());
  FeatureExtractor b(FrontendConfig::gammatone());
  const Waveform w = noise(16000, 11);
  const auto x = a.extract(w);
  const auto y = b.extract(w);
  const auto z = a.extract(w);
  CHECK(std::memcmp(x.values.data(), y.values.data(), x.values.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(x.values.data(), z.values.data(), x.values.size() * sizeof(double)) == 0);
}

TEST_CASE("wrong sample rate is rejected") {
  FeatureExtractor fx(FrontendConfig::gammatone());
  Waveform w = noise(16000, 1);
  w.sample_rate = 8000;
  CHECK_THROWS_AS(fx.extract(w), FormatError);
}

TEST_CASE("norm stats: zero-variance bin is floored") {
  Spectrogram a = random_spec(64, 10, 1);
  Spectrogram b = random_spec(64, 10, 2);
  for (std::size_t t = 0; t < 10; ++t) {
    a.at(0, t) = 3.0;
    b.at(0, t) = 3.0;
  }
  const std::vector<Spectrogram> all{a, b};
  const auto stats = fit_norm_stats(all);
  CHECK(stats.mean[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(stats.std[0] == kStdFloor);
  CHECK(stats.n_frames_fitted == 20);
  for (double s : stats.std) CHECK(s >= kStdFloor);
}

TEST_CASE("norm stats: fit then apply standardizes the fitting corpus") {
  const std::vector<Spectrogram> corpus{random_spec(64, 37, 5), random_spec(64, 50, 6)};
  const auto stats = fit_norm_stats(corpus);
  std::vector<double> sum(64, 0.0), sum_sq(64, 0.0);
  std::size_t n = 0;
  for (const auto& s : corpus) {
    const auto z = apply_norm(s, stats);
    for (std::size_t f = 0; f < 64; ++f) {
      for (std::size_t t = 0; t < z.n_frames; ++t) {
        sum[f] += z.at(f, t);
        sum_sq[f] += z.at(f, t) * z.at(f, t);
      }
    }
    n += s.n_frames;
  }
  for (std::size_t f = 0; f < 64; ++f) {
    const double mean = sum[f] / static_cast<double>(n);
    const double var = sum_sq[f] / static_cast<double>(n) - mean * mean;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-6);
  }
}

TEST_CASE("norm stats: unseen clip is not centered") {
  const std::vector<Spectrogram> corpus{random_spec(64, 40, 8)};
  const auto stats = fit_norm_stats(corpus);
  Spectrogram shifted = random_spec(64, 40, 9);
  for (double& v : shifted.values) v += 5.0;
  const auto z = apply_norm(shifted, stats);
  double mean = 0.0;
  for (double v : z.values) mean += v;
  mean /= static_cast<double>(z.values.size());
  CHECK(mean > 1.0);
}

TEST_CASE("apply_norm identities and inverse") {
  const Spectrogram s = random_spec(64, 12, 4);
  NormStats unit;
  unit.mean.assign(64, 0.0);
  unit.std.assign(64, 1.0);
  CHECK(apply_norm(s, unit).values == s.values);

  const std::vector<Spectrogram> corpus{random_spec(64, 30, 12)};
  const auto stats = fit_norm_stats(corpus);
  Spectrogram at_mean = s;
  for (std::size_t f = 0; f < 64; ++f) {
    for (std::size_t t = 0; t < 12; ++t) at_mean.at(f, t) = stats.mean[f];
  }
  for (double v : apply_norm(at_mean, stats).values) CHECK(v == 0.0);

  const auto z = apply_norm(s, stats);
  for (std::size_t f = 0; f < 64; ++f) {
    for (std::size_t t = 0; t < 12; ++t) {
      CHECK(std::abs(z.at(f, t) * stats.std[f] + stats.mean[f] - s.at(f, t)) < 1e-9);
    }
  }

  CHECK_THROWS_AS(apply_norm(random_spec(32, 4, 1), stats), ShapeError);
  CHECK_THROWS_AS(fit_norm_stats(std::vector<Spectrogram>{}), ConfigError);
}

TEST_CASE("sharded accumulation is order independent") {
  std::vector<Spectrogram> parts;
  for (unsigned i = 0; i < 6; ++i) parts.push_back(random_spec(64, 20 + i, 100 + i));
  const auto whole = fit_norm_stats(parts);

  NormAccumulator left, right, merged_lr, merged_rl;
  for (std::size_t i = 0; i < parts.size(); ++i) (i % 2 ? right : left).add(parts[i]);
  merged_lr.merge(left);
  merged_lr.merge(right);
  merged_rl.merge(right);
  merged_rl.merge(left);
  const auto a = merged_lr.finish();
  const auto b = merged_rl.finish();
  for (std::size_t f = 0; f < 64; ++f) {
    CHECK(std::abs(a.mean[f] - whole.mean[f]) < 1e-9);
    CHECK(std::abs(a.std[f] - whole.std[f]) < 1e-9);
    CHECK(std::abs(a.mean[f] - b.mean[f]) < 1e-9);
    CHECK(std::abs(a.std[f] - b.std[f]) < 1e-9);
  }
  CHECK(a.n_frames_fitted == whole.n_frames_fitted);
}

TEST_CASE("baseline Mel vectors") {
  const auto samples_for = [](std::size_t frames) { return 1024 + (frames - 1) * 512; };

  const auto five = baseline_mel_vectors(noise(samples_for(5), 1));
  REQUIRE(five.size() == 1);
  CHECK(five[0].size() == 640);

  const Waveform w = noise(samples_for(100), 2);
  const auto vectors = baseline_mel_vectors(w);
  CHECK(vectors.size() == 96);

  // Layout: vector c holds frames c..c+4, frame-major.
  FeatureExtractor fx(FrontendConfig::mel());
  const auto mel = fx.extract(w);
  REQUIRE(mel.n_bins == 128);
  REQUIRE(mel.n_frames == 100);
  for (std::size_t c : {std::size_t{0}, std::size_t{41}, std::size_t{95}}) {
    for (std::size_t j = 0; j < 5; ++j) {
      for (std::size_t f = 0; f < 128; ++f) CHECK(vectors[c][j * 128 + f] == mel.at(f, c + j));
    }
  }

  CHECK_THROWS_AS(baseline_mel_vectors(noise(samples_for(4), 3)), ClipTooShortError);
}

TEST_CASE("feature and norm files round trip") {
  const auto dir = temp_dir("files");
  Spectrogram s = random_spec(64, 9, 21);
  s.tag = FrontendTag::gammatone64;
  write_feature_file(dir / "a.feat", s);
  const auto back = read_feature_file(dir / "a.feat");
  CHECK(back.n_bins == 64);
  CHECK(back.n_frames == 9);
  CHECK(back.tag == FrontendTag::gammatone64);
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    CHECK(back.values[i] == static_cast<double>(static_cast<float>(s.values[i])));
  }

  const auto stats = fit_norm_stats(std::vector<Spectrogram>{s});
  save_norm_stats(dir / "norm.json", stats);
  const auto loaded = load_norm_stats(dir / "norm.json");
  CHECK(loaded.mean == stats.mean);
  CHECK(loaded.std == stats.std);
  CHECK(loaded.n_frames_fitted == stats.n_frames_fitted);
  CHECK(loaded.hash() == stats.hash());

  // Truncated cache file.
  auto bytes = read_file_bytes(dir / "a.feat");
  bytes.resize(bytes.size() - 3);
  write_file_atomic(dir / "b.feat", bytes);
  CHECK_THROWS_AS(read_feature_file(dir / "b.feat"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("frontend config hash separates settings") {
  auto a = FrontendConfig::gammatone();
  auto b = FrontendConfig::gammatone();
  CHECK(a.hash() == b.hash());
  b.hop = 160;
  CHECK(a.hash() != b.hash());
  CHECK(FrontendConfig::mel().hash() != a.hash());
}

TEST_CASE("WAV decoding") {
  CHECK_NOTHROW(decode_wav(wav_bytes(1, 16000, 16, 700)));
  CHECK(decode_wav(wav_bytes(1, 16000, 16, 700)).samples.size() == 700);
  CHECK_THROWS_AS(decode_wav(wav_bytes(2, 16000, 16, 700)), FormatError);
  CHECK_THROWS_AS(decode_wav(wav_bytes(1, 8000, 16, 700)), FormatError);
  CHECK_THROWS_AS(decode_wav(wav_bytes(1, 16000, 8, 700)), FormatError);
  auto junk = wav_bytes(1, 16000, 16, 10);
  junk[0] = std::byte{'X'};
  CHECK_THROWS_AS(decode_wav(junk), FormatError);

  const auto dir = temp_dir("wav");
  Waveform w = sine(440.0, 4000);
  write_wav(dir / "x.wav", w);
  const auto back = read_wav(dir / "x.wav");
  REQUIRE(back.samples.size() == w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i) CHECK(std::abs(back.samples[i] - w.samples[i]) < 1.0 / 32767.0);
  std::filesystem::remove_all(dir);
}
