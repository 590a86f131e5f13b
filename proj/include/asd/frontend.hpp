#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "asd/wav.hpp"

namespace asd {

inline constexpr double kLogFloor = 1e-10;
inline constexpr double kStdFloor = 1e-5;

enum class FrontendTag : std::uint8_t { gammatone64 = 1, mel128 = 2 };

std::string_view to_string(FrontendTag tag);
FrontendTag parse_frontend_tag(std::string_view text);

// Analysis parameters for one feature representation. The defaults of
// gammatone() are the 64-band, 40 ms / 50 % overlap log-gammatone features;
// mel() is the 128-band, 64 ms / 50 % overlap log-Mel used by the dense
// baseline.
struct FrontendConfig {
  FrontendTag tag = FrontendTag::gammatone64;
  std::size_t n_filters = 64;
  double f_min = 50.0;
  double f_max = 8000.0;
  std::size_t window = 640;
  std::size_t hop = 320;
  std::size_t n_fft = 1024;
  double log_floor = kLogFloor;

  static FrontendConfig gammatone();
  static FrontendConfig mel();

  void validate() const;
  // Stable text form; its hash keys the feature cache.
  std::string canonical() const;
  std::string hash() const;
};

struct FilterbankSpec {
  std::size_t n_filters = 0;
  std::size_t n_fft = 0;
  double f_min = 0.0;
  double f_max = 0.0;
  std::vector<double> center_freqs;
  // n_filters x (n_fft / 2 + 1), row-major.
  std::vector<double> weights;

  std::size_t n_bins() const noexcept { return n_fft / 2 + 1; }
  std::span<const double> row(std::size_t filter) const {
    return std::span(weights).subspan(filter * n_bins(), n_bins());
  }
};

// F x T matrix, row-major (frequency bins are rows, frames are columns).
struct Spectrogram {
  std::size_t n_bins = 0;
  std::size_t n_frames = 0;
  FrontendTag tag = FrontendTag::gammatone64;
  std::vector<double> values;

  double& at(std::size_t bin, std::size_t frame) { return values[bin * n_frames + frame]; }
  double at(std::size_t bin, std::size_t frame) const { return values[bin * n_frames + frame]; }
};

struct NormStats {
  FrontendTag tag = FrontendTag::gammatone64;
  std::vector<double> mean;
  std::vector<double> std;
  std::uint64_t n_frames_fitted = 0;

  std::size_t n_bins() const noexcept { return mean.size(); }
  std::string hash() const;
};

std::size_t frame_count(std::size_t n_samples, std::size_t window, std::size_t hop);

// Views into wave.samples; trailing samples that do not fill a window are
// dropped. Throws ClipTooShortError when not even one window fits.
std::vector<std::span<const double>> frame_signal(const Waveform& wave, std::size_t window,
                                                  std::size_t hop);

// Glasberg & Moore ERB-number scale.
double hz_to_erb_rate(double hz);
double erb_rate_to_hz(double erb_rate);
double erb_bandwidth(double hz);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Center frequencies uniform on the ERB-number scale; each row is the
// 4th-order gammatone magnitude response sampled at the FFT bin frequencies
// and scaled so its largest entry is 1.
FilterbankSpec build_gammatone_bank(std::size_t n_filters, double f_min, double f_max,
                                    std::size_t n_fft, int sample_rate);

// Unit-peak triangular filters on the Slaney mel scale.
FilterbankSpec build_mel_bank(std::size_t n_filters, double f_min, double f_max, std::size_t n_fft,
                              int sample_rate);

// Hann-windowed power spectra followed by filterbank weighting and
// log(energy + log_floor). Owns its FFT plan and scratch buffers, so one
// instance must not be shared between threads.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(FrontendConfig config);
  // Uses a prebuilt bank; its geometry overrides the config's filter fields.
  FeatureExtractor(FrontendConfig config, FilterbankSpec bank);
  ~FeatureExtractor();
  FeatureExtractor(FeatureExtractor&&) noexcept;
  FeatureExtractor& operator=(FeatureExtractor&&) noexcept;
  FeatureExtractor(const FeatureExtractor&) = delete;
  FeatureExtractor& operator=(const FeatureExtractor&) = delete;

  const FrontendConfig& config() const noexcept { return config_; }
  const FilterbankSpec& bank() const noexcept { return bank_; }

  Spectrogram extract(const Waveform& wave);
  // Filterbank energies before the log, n_filters x T.
  Spectrogram band_energies(const Waveform& wave);

 private:
  struct Fft;

  FrontendConfig config_;
  FilterbankSpec bank_;
  std::vector<double> window_;
  std::unique_ptr<Fft> fft_;
};

Spectrogram gammatone_spectrogram(const Waveform& wave, const FilterbankSpec& bank);
Spectrogram log_mel_spectrogram(const Waveform& wave, const FilterbankSpec& bank);

// Streaming sum / sum-of-squares accumulator; shards may be merged in any
// order.
class NormAccumulator {
 public:
  void add(const Spectrogram& spec);
  void merge(const NormAccumulator& other);
  NormStats finish() const;

 private:
  bool initialized_ = false;
  FrontendTag tag_ = FrontendTag::gammatone64;
  std::vector<double> sum_;
  std::vector<double> sum_sq_;
  std::uint64_t frames_ = 0;
};

// Per-bin mean and population standard deviation over every frame of every
// input, std clamped below at kStdFloor.
NormStats fit_norm_stats(std::span<const Spectrogram> spectrograms);
Spectrogram apply_norm(const Spectrogram& spec, const NormStats& stats);

// Concatenates frames t-context .. t+context for every valid center t,
// frame-major: out[j * F + f] = spec(f, t - context + j).
std::vector<std::vector<double>> stack_frames(const Spectrogram& spec, std::size_t context = 2);
std::vector<std::vector<double>> baseline_mel_vectors(const Waveform& wave);

// Feature cache file: magic, version byte, tag byte, F, T, float32 values.
inline constexpr std::uint8_t kFeatureFormatVersion = 1;
void write_feature_file(const std::filesystem::path& path, const Spectrogram& spec);
Spectrogram read_feature_file(const std::filesystem::path& path);

void save_norm_stats(const std::filesystem::path& path, const NormStats& stats);
NormStats load_norm_stats(const std::filesystem::path& path);

// Write to a sibling temp file then rename over the target.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

}  // namespace asd
