#include "asd/frontend.hpp"

#include <fftw3.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "asd/errors.hpp"
#include "asd/hash.hpp"

namespace asd {
namespace {

// FFTW planning is not thread-safe; execution on distinct plans is.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string_view to_string(FrontendTag tag) {
  switch (tag) {
    case FrontendTag::gammatone64:
      return "gammatone64";
    case FrontendTag::mel128:
      return "mel128";
  }
  return "unknown";
}

FrontendTag parse_frontend_tag(std::string_view text) {
  if (text == "gammatone64") return FrontendTag::gammatone64;
  if (text == "mel128") return FrontendTag::mel128;
  throw ConfigError("unknown frontend tag '" + std::string(text) + "'");
}

FrontendConfig FrontendConfig::gammatone() { return FrontendConfig{}; }

FrontendConfig FrontendConfig::mel() {
  FrontendConfig c;
  c.tag = FrontendTag::mel128;
  c.n_filters = 128;
  c.f_min = 0.0;
  c.f_max = 8000.0;
  c.window = 1024;
  c.hop = 512;
  c.n_fft = 1024;
  return c;
}

void FrontendConfig::validate() const {
  if (n_filters == 0) throw ConfigError("frontend: n_filters must be >= 1");
  if (window == 0 || hop == 0) throw ConfigError("frontend: window and hop must be >= 1");
  if (n_fft < window) throw ConfigError("frontend: n_fft must be >= window");
  if (!(f_min >= 0.0) || !(f_min < f_max)) throw ConfigError("frontend: need 0 <= f_min < f_max");
  if (f_max > kSampleRate / 2.0) throw ConfigError("frontend: f_max above Nyquist");
  if (tag == FrontendTag::gammatone64 && !(f_min > 0.0)) {
    throw ConfigError("frontend: gammatone bank needs f_min > 0");
  }
  if (!(log_floor > 0.0)) throw ConfigError("frontend: log_floor must be positive");
}

std::string FrontendConfig::canonical() const {
  std::ostringstream os;
  os << "tag=" << to_string(tag) << ";n_filters=" << n_filters << ";f_min=" << format_double(f_min)
     << ";f_max=" << format_double(f_max) << ";window=" << window << ";hop=" << hop
     << ";n_fft=" << n_fft << ";log_floor=" << format_double(log_floor)
     << ";format=" << static_cast<int>(kFeatureFormatVersion);
  return os.str();
}

std::string FrontendConfig::hash() const { return to_hex(fnv1a(canonical())); }

std::string NormStats::hash() const {
  Fnv1a h;
  h.update(to_string(tag));
  h.update(std::as_bytes(std::span(mean)));
  h.update(std::as_bytes(std::span(std)));
  return to_hex(h.digest());
}

std::size_t frame_count(std::size_t n_samples, std::size_t window, std::size_t hop) {
  if (hop == 0) throw ConfigError("hop must be >= 1");
  if (n_samples < window) return 0;
  return 1 + (n_samples - window) / hop;
}

std::vector<std::span<const double>> frame_signal(const Waveform& wave, std::size_t window,
                                                  std::size_t hop) {
  if (hop == 0 || window == 0) throw ConfigError("window and hop must be >= 1");
  if (wave.samples.size() < window) {
    throw ClipTooShortError("clip too short: " + std::to_string(wave.samples.size()) +
                            " samples, need at least " + std::to_string(window));
  }
  const std::size_t n = frame_count(wave.samples.size(), window, hop);
  std::vector<std::span<const double>> frames;
  frames.reserve(n);
  const std::span<const double> all(wave.samples);
  for (std::size_t k = 0; k < n; ++k) frames.push_back(all.subspan(k * hop, window));
  return frames;
}

double hz_to_erb_rate(double hz) { return 21.4 * std::log10(1.0 + 0.00437 * hz); }

double erb_rate_to_hz(double erb_rate) { return (std::pow(10.0, erb_rate / 21.4) - 1.0) / 0.00437; }

double erb_bandwidth(double hz) { return 24.7 * (4.37 * hz / 1000.0 + 1.0); }

// Slaney: linear below 1 kHz, logarithmic above.
double hz_to_mel(double hz) {
  constexpr double f_sp = 200.0 / 3.0;
  constexpr double min_log_hz = 1000.0;
  const double min_log_mel = min_log_hz / f_sp;
  const double log_step = std::log(6.4) / 27.0;
  if (hz < min_log_hz) return hz / f_sp;
  return min_log_mel + std::log(hz / min_log_hz) / log_step;
}

double mel_to_hz(double mel) {
  constexpr double f_sp = 200.0 / 3.0;
  constexpr double min_log_hz = 1000.0;
  const double min_log_mel = min_log_hz / f_sp;
  const double log_step = std::log(6.4) / 27.0;
  if (mel < min_log_mel) return mel * f_sp;
  return min_log_hz * std::exp(log_step * (mel - min_log_mel));
}

FilterbankSpec build_gammatone_bank(std::size_t n_filters, double f_min, double f_max,
                                    std::size_t n_fft, int sample_rate) {
  if (n_filters == 0) throw ConfigError("gammatone bank: n_filters must be >= 1");
  if (n_fft < 2) throw ConfigError("gammatone bank: n_fft must be >= 2");
  if (!(f_min > 0.0) || !(f_min < f_max)) throw ConfigError("gammatone bank: need 0 < f_min < f_max");
  if (f_max > sample_rate / 2.0) throw ConfigError("gammatone bank: f_max above Nyquist");

  FilterbankSpec bank;
  bank.n_filters = n_filters;
  bank.n_fft = n_fft;
  bank.f_min = f_min;
  bank.f_max = f_max;

  const double erb_lo = hz_to_erb_rate(f_min);
  const double erb_hi = hz_to_erb_rate(f_max);
  bank.center_freqs.resize(n_filters);
  for (std::size_t i = 0; i < n_filters; ++i) {
    const double frac = n_filters == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n_filters - 1);
    bank.center_freqs[i] = erb_rate_to_hz(erb_lo + frac * (erb_hi - erb_lo));
  }
  // pin the endpoints against pow/log10 round-off
  bank.center_freqs.front() = f_min;
  if (n_filters > 1) bank.center_freqs.back() = f_max;

  const std::size_t n_bins = bank.n_bins();
  const double bin_hz = static_cast<double>(sample_rate) / static_cast<double>(n_fft);
  bank.weights.assign(n_filters * n_bins, 0.0);
  for (std::size_t i = 0; i < n_filters; ++i) {
    const double fc = bank.center_freqs[i];
    const double b = 1.019 * erb_bandwidth(fc);
    double peak = 0.0;
    auto row = std::span(bank.weights).subspan(i * n_bins, n_bins);
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double x = (static_cast<double>(k) * bin_hz - fc) / b;
      const double base = 1.0 + x * x;
      row[k] = 1.0 / (base * base);  // order 4: (1 + x^2)^(-n/2)
      peak = std::max(peak, row[k]);
    }
    for (double& w : row) w /= peak;
  }
  return bank;
}

FilterbankSpec build_mel_bank(std::size_t n_filters, double f_min, double f_max, std::size_t n_fft,
                              int sample_rate) {
  if (n_filters == 0) throw ConfigError("mel bank: n_filters must be >= 1");
  if (!(f_min >= 0.0) || !(f_min < f_max)) throw ConfigError("mel bank: need 0 <= f_min < f_max");
  if (f_max > sample_rate / 2.0) throw ConfigError("mel bank: f_max above Nyquist");

  FilterbankSpec bank;
  bank.n_filters = n_filters;
  bank.n_fft = n_fft;
  bank.f_min = f_min;
  bank.f_max = f_max;

  const double mel_lo = hz_to_mel(f_min);
  const double mel_hi = hz_to_mel(f_max);
  std::vector<double> edges(n_filters + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                      static_cast<double>(n_filters + 1));
  }
  bank.center_freqs.assign(edges.begin() + 1, edges.end() - 1);

  const std::size_t n_bins = bank.n_bins();
  const double bin_hz = static_cast<double>(sample_rate) / static_cast<double>(n_fft);
  bank.weights.assign(n_filters * n_bins, 0.0);
  for (std::size_t i = 0; i < n_filters; ++i) {
    const double lo = edges[i], mid = edges[i + 1], hi = edges[i + 2];
    bool any = false;
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      const double w = std::max(0.0, std::min((f - lo) / (mid - lo), (hi - f) / (hi - mid)));
      bank.weights[i * n_bins + k] = w;
      any = any || w > 0.0;
    }
    if (!any) {
      throw ConfigError("mel bank: filter " + std::to_string(i) +
                        " covers no FFT bin; reduce n_filters or raise n_fft");
    }
  }
  return bank;
}

struct FeatureExtractor::Fft {
  explicit Fft(std::size_t n) : size(n) {
    in = fftw_alloc_real(n);
    out = fftw_alloc_complex(n / 2 + 1);
    std::lock_guard lock(fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(n), in, out, FFTW_ESTIMATE);
  }
  ~Fft() {
    {
      std::lock_guard lock(fftw_planner_mutex());
      fftw_destroy_plan(plan);
    }
    fftw_free(in);
    fftw_free(out);
  }
  Fft(const Fft&) = delete;
  Fft& operator=(const Fft&) = delete;

  std::size_t size;
  double* in = nullptr;
  fftw_complex* out = nullptr;
  fftw_plan plan = nullptr;
};

namespace {

FilterbankSpec bank_for(const FrontendConfig& c) {
  c.validate();
  return c.tag == FrontendTag::gammatone64
             ? build_gammatone_bank(c.n_filters, c.f_min, c.f_max, c.n_fft, kSampleRate)
             : build_mel_bank(c.n_filters, c.f_min, c.f_max, c.n_fft, kSampleRate);
}

}  // namespace

FeatureExtractor::FeatureExtractor(FrontendConfig config)
    : FeatureExtractor(config, bank_for(config)) {}

FeatureExtractor::FeatureExtractor(FrontendConfig config, FilterbankSpec bank)
    : config_(std::move(config)), bank_(std::move(bank)) {
  config_.n_filters = bank_.n_filters;
  config_.n_fft = bank_.n_fft;
  config_.f_min = bank_.f_min;
  config_.f_max = bank_.f_max;
  if (config_.window == 0 || config_.hop == 0 || config_.n_fft < config_.window) {
    throw ConfigError("frontend: need window, hop >= 1 and n_fft >= window");
  }
  // periodic Hann
  window_.resize(config_.window);
  for (std::size_t n = 0; n < config_.window; ++n) {
    window_[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) /
                                      static_cast<double>(config_.window));
  }
  fft_ = std::make_unique<Fft>(config_.n_fft);
}

FeatureExtractor::~FeatureExtractor() = default;
FeatureExtractor::FeatureExtractor(FeatureExtractor&&) noexcept = default;
FeatureExtractor& FeatureExtractor::operator=(FeatureExtractor&&) noexcept = default;

Spectrogram FeatureExtractor::band_energies(const Waveform& wave) {
  if (wave.sample_rate != kSampleRate) {
    throw FormatError("expected 16000 Hz audio, got " + std::to_string(wave.sample_rate));
  }
  const auto frames = frame_signal(wave, config_.window, config_.hop);
  const std::size_t n_bins = bank_.n_bins();
  const std::size_t n_filters = bank_.n_filters;

  Spectrogram spec;
  spec.tag = config_.tag;
  spec.n_bins = n_filters;
  spec.n_frames = frames.size();
  spec.values.assign(n_filters * frames.size(), 0.0);

  std::vector<double> power(n_bins);
  for (std::size_t t = 0; t < frames.size(); ++t) {
    std::fill(fft_->in, fft_->in + fft_->size, 0.0);
    for (std::size_t n = 0; n < config_.window; ++n) fft_->in[n] = frames[t][n] * window_[n];
    fftw_execute(fft_->plan);
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double re = fft_->out[k][0];
      const double im = fft_->out[k][1];
      power[k] = re * re + im * im;
    }
    for (std::size_t f = 0; f < n_filters; ++f) {
      const auto w = bank_.row(f);
      double e = 0.0;
      for (std::size_t k = 0; k < n_bins; ++k) e += w[k] * power[k];
      spec.values[f * spec.n_frames + t] = e;
    }
  }
  return spec;
}

Spectrogram FeatureExtractor::extract(const Waveform& wave) {
  Spectrogram spec = band_energies(wave);
  for (double& v : spec.values) v = std::log(v + config_.log_floor);
  return spec;
}

Spectrogram gammatone_spectrogram(const Waveform& wave, const FilterbankSpec& bank) {
  FeatureExtractor extractor(FrontendConfig::gammatone(), bank);
  return extractor.extract(wave);
}

Spectrogram log_mel_spectrogram(const Waveform& wave, const FilterbankSpec& bank) {
  FrontendConfig config = FrontendConfig::mel();
  FeatureExtractor extractor(config, bank);
  return extractor.extract(wave);
}

void NormAccumulator::add(const Spectrogram& spec) {
  if (!initialized_) {
    initialized_ = true;
    tag_ = spec.tag;
    sum_.assign(spec.n_bins, 0.0);
    sum_sq_.assign(spec.n_bins, 0.0);
  } else if (spec.n_bins != sum_.size() || spec.tag != tag_) {
    throw ShapeError("normalization inputs disagree on frontend or bin count");
  }
  for (std::size_t f = 0; f < spec.n_bins; ++f) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t t = 0; t < spec.n_frames; ++t) {
      const double v = spec.at(f, t);
      s += v;
      s2 += v * v;
    }
    sum_[f] += s;
    sum_sq_[f] += s2;
  }
  frames_ += spec.n_frames;
}

void NormAccumulator::merge(const NormAccumulator& other) {
  if (!other.initialized_) return;
  if (!initialized_) {
    *this = other;
    return;
  }
  if (other.sum_.size() != sum_.size() || other.tag_ != tag_) {
    throw ShapeError("cannot merge normalization shards with different geometry");
  }
  for (std::size_t f = 0; f < sum_.size(); ++f) {
    sum_[f] += other.sum_[f];
    sum_sq_[f] += other.sum_sq_[f];
  }
  frames_ += other.frames_;
}

NormStats NormAccumulator::finish() const {
  if (!initialized_) throw ConfigError("cannot fit normalization statistics on an empty collection");
  if (frames_ < 2) throw ConfigError("normalization needs at least 2 frames");
  NormStats stats;
  stats.tag = tag_;
  stats.n_frames_fitted = frames_;
  stats.mean.resize(sum_.size());
  stats.std.resize(sum_.size());
  const double n = static_cast<double>(frames_);
  for (std::size_t f = 0; f < sum_.size(); ++f) {
    const double mean = sum_[f] / n;
    const double var = std::max(0.0, sum_sq_[f] / n - mean * mean);
    stats.mean[f] = mean;
    stats.std[f] = std::max(std::sqrt(var), kStdFloor);
  }
  return stats;
}

NormStats fit_norm_stats(std::span<const Spectrogram> spectrograms) {
  if (spectrograms.empty()) throw ConfigError("cannot fit normalization statistics on an empty collection");
  NormAccumulator acc;
  for (const auto& s : spectrograms) acc.add(s);
  return acc.finish();
}

Spectrogram apply_norm(const Spectrogram& spec, const NormStats& stats) {
  if (spec.n_bins != stats.n_bins()) {
    throw ShapeError("normalization has " + std::to_string(stats.n_bins()) + " bins, spectrogram has " +
                     std::to_string(spec.n_bins));
  }
  Spectrogram out = spec;
  for (std::size_t f = 0; f < spec.n_bins; ++f) {
    const double m = stats.mean[f];
    const double s = stats.std[f];
    for (std::size_t t = 0; t < spec.n_frames; ++t) out.at(f, t) = (spec.at(f, t) - m) / s;
  }
  return out;
}

std::vector<std::vector<double>> stack_frames(const Spectrogram& spec, std::size_t context) {
  const std::size_t span = 2 * context + 1;
  if (spec.n_frames < span) {
    throw ClipTooShortError("clip too short: " + std::to_string(spec.n_frames) + " frames, need at least " +
                            std::to_string(span));
  }
  const std::size_t n_vectors = spec.n_frames - span + 1;
  std::vector<std::vector<double>> out(n_vectors, std::vector<double>(span * spec.n_bins));
  for (std::size_t v = 0; v < n_vectors; ++v) {
    for (std::size_t j = 0; j < span; ++j) {
      for (std::size_t f = 0; f < spec.n_bins; ++f) out[v][j * spec.n_bins + f] = spec.at(f, v + j);
    }
  }
  return out;
}

std::vector<std::vector<double>> baseline_mel_vectors(const Waveform& wave) {
  FeatureExtractor extractor(FrontendConfig::mel());
  const auto n_frames = frame_count(wave.samples.size(), extractor.config().window, extractor.config().hop);
  if (n_frames < 5) {
    throw ClipTooShortError("clip too short for frame stacking: " + std::to_string(n_frames) +
                            " Mel frames, need at least 5");
  }
  return stack_frames(extractor.extract(wave), 2);
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Unique per writer so concurrent extractions of identical clips do not
  // share a temp file.
  static std::atomic<std::uint64_t> counter{0};
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter.fetch_add(1));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::as_bytes(std::span(text.data(), text.size())));
}

namespace {

constexpr char kFeatureMagic[4] = {'A', 'S', 'D', 'F'};

void append_u32(std::vector<std::byte>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
}

std::uint32_t take_u32(std::span<const std::byte> b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

}  // namespace

void write_feature_file(const std::filesystem::path& path, const Spectrogram& spec) {
  std::vector<std::byte> out;
  out.reserve(14 + 4 * spec.values.size());
  for (char c : kFeatureMagic) out.push_back(static_cast<std::byte>(c));
  out.push_back(static_cast<std::byte>(kFeatureFormatVersion));
  out.push_back(static_cast<std::byte>(spec.tag));
  append_u32(out, static_cast<std::uint32_t>(spec.n_bins));
  append_u32(out, static_cast<std::uint32_t>(spec.n_frames));
  for (double v : spec.values) {
    const auto f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    append_u32(out, bits);
  }
  write_file_atomic(path, out);
}

Spectrogram read_feature_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < 14 || std::memcmp(bytes.data(), kFeatureMagic, 4) != 0) {
    throw FormatError(path.string() + ": not a feature cache file");
  }
  if (static_cast<std::uint8_t>(bytes[4]) != kFeatureFormatVersion) {
    throw FormatError(path.string() + ": unsupported feature format version");
  }
  Spectrogram spec;
  const auto tag = static_cast<std::uint8_t>(bytes[5]);
  if (tag != 1 && tag != 2) throw FormatError(path.string() + ": unknown frontend tag");
  spec.tag = static_cast<FrontendTag>(tag);
  spec.n_bins = take_u32(bytes, 6);
  spec.n_frames = take_u32(bytes, 10);
  const std::size_t n = spec.n_bins * spec.n_frames;
  if (bytes.size() != 14 + 4 * n) throw FormatError(path.string() + ": truncated feature file");
  spec.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t bits = take_u32(bytes, 14 + 4 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    spec.values[i] = f;
  }
  return spec;
}

void save_norm_stats(const std::filesystem::path& path, const NormStats& stats) {
  nlohmann::json j;
  j["format"] = "asd-normstats";
  j["version"] = 1;
  j["frontend_tag"] = std::string(to_string(stats.tag));
  j["F"] = stats.n_bins();
  j["mean"] = stats.mean;
  j["std"] = stats.std;
  j["n_frames_fitted"] = stats.n_frames_fitted;
  j["std_floor"] = kStdFloor;
  write_file_atomic(path, j.dump(1) + "\n");
}

NormStats load_norm_stats(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    if (j.at("format") != "asd-normstats") throw FormatError("wrong format tag");
    NormStats stats;
    stats.tag = parse_frontend_tag(j.at("frontend_tag").get<std::string>());
    stats.mean = j.at("mean").get<std::vector<double>>();
    stats.std = j.at("std").get<std::vector<double>>();
    stats.n_frames_fitted = j.at("n_frames_fitted").get<std::uint64_t>();
    if (stats.mean.size() != j.at("F").get<std::size_t>() || stats.std.size() != stats.mean.size()) {
      throw FormatError("bin count mismatch");
    }
    return stats;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace asd
