// Python bindings: features, metrics, synthetic clips, and scoring with a
// trained run directory.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "asd/checkpoint.hpp"
#include "asd/errors.hpp"
#include "asd/evaluator.hpp"
#include "asd/frontend.hpp"
#include "asd/pipeline.hpp"
#include "asd/synth.hpp"
#include "asd/wav.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;

namespace {

using Samples = py::array_t<double, py::array::c_style | py::array::forcecast>;

asd::Waveform to_waveform(const Samples& samples, int sample_rate) {
  if (samples.ndim() != 1) throw asd::ShapeError("expected a 1-D array of samples");
  asd::Waveform wave;
  wave.samples.assign(samples.data(), samples.data() + samples.size());
  wave.sample_rate = sample_rate;
  return wave;
}

// Both constructors copy from the pointer.
py::array_t<double> to_array(const asd::Spectrogram& spec) {
  const std::vector<py::ssize_t> shape{static_cast<py::ssize_t>(spec.n_bins), static_cast<py::ssize_t>(spec.n_frames)};
  return py::array_t<double>(shape, spec.values.data());
}

py::array_t<double> to_array(const std::vector<double>& v) {
  return py::array_t<double>(static_cast<py::ssize_t>(v.size()), v.data());
}

asd::Spectrogram extract(const Samples& samples, int sample_rate, const asd::FrontendConfig& config) {
  asd::FeatureExtractor fx(config);
  const asd::Waveform wave = to_waveform(samples, sample_rate);
  py::gil_scoped_release release;
  return fx.extract(wave);
}

asd::EvaluationSet evaluation_set(std::vector<double> normal, std::vector<double> anomaly, double p) {
  asd::EvaluationSet s;
  s.normal_scores = std::move(normal);
  s.anomaly_scores = std::move(anomaly);
  s.p = p;
  return s;
}

// A trained run directory: best checkpoint, its normalization and the
// segmentation and frontend recorded in config.yaml. Refuses a run whose
// pieces disagree, as `asd score` does.
class Detector {
 public:
  explicit Detector(const fs::path& run_dir) : run_dir_(run_dir) {
    config_ = asd::load_run_config(run_dir / "config.yaml");
    model_ = asd::load_checkpoint_as<float>(run_dir / "best.ckpt", &checksum_);
    stats_ = asd::load_norm_stats(run_dir / "norm.json");
    if (stats_.hash() != model_.metadata.norm_stats_hash) {
      throw asd::LineageError("norm.json in " + run_dir.string() + " does not match best.ckpt");
    }
    if (model_.metadata.frontend_hash != config_.frontend().hash()) {
      throw asd::LineageError("best.ckpt in " + run_dir.string() + " was trained on a different frontend");
    }
  }

  double score(const Samples& samples, int sample_rate) {
    const asd::Spectrogram spec = cached_precision(extract(samples, sample_rate, config_.frontend()));
    py::gil_scoped_release release;
    return asd::anomaly_score(model_, spec, stats_, config_.segment_frames, config_.segment_hop);
  }

  py::array_t<double> segment_errors(const Samples& samples, int sample_rate) {
    const asd::Spectrogram spec = cached_precision(extract(samples, sample_rate, config_.frontend()));
    std::vector<double> errors;
    {
      py::gil_scoped_release release;
      errors = asd::segment_errors(model_, asd::apply_norm(spec, stats_), config_.segment_frames,
                                   config_.segment_hop);
    }
    return to_array(errors);
  }

  std::string family() const { return std::string(asd::to_string(model_.config.family)); }
  const std::string& checksum() const { return checksum_; }
  std::string run_hash() const { return model_.metadata.run_config_hash; }
  const fs::path& run_dir() const { return run_dir_; }

 private:
  // The pipeline scores features read back from the float32 cache; rounding
  // the same way makes these scores equal to the ones in scores.csv.
  static asd::Spectrogram cached_precision(asd::Spectrogram spec) {
    for (auto& v : spec.values) v = static_cast<double>(static_cast<float>(v));
    return spec;
  }

  fs::path run_dir_;
  asd::RunConfig config_;
  asd::ModelGraph<float> model_;
  asd::NormStats stats_;
  std::string checksum_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Anomalous sound detection with convolutional autoencoders on log-gammatone features.";

  auto base = py::register_exception<asd::Error>(m, "AsdError", PyExc_RuntimeError);
  py::register_exception<asd::ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<asd::FormatError>(m, "FormatError", base.ptr());
  py::register_exception<asd::ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<asd::MetricError>(m, "MetricError", base.ptr());
  py::register_exception<asd::ClipTooShortError>(m, "ClipTooShortError", base.ptr());
  py::register_exception<asd::LineageError>(m, "LineageError", base.ptr());

  m.attr("SAMPLE_RATE") = asd::kSampleRate;

  m.def("read_wav", [](const fs::path& path) { return to_array(asd::read_wav(path).samples); }, py::arg("path"),
        "16-bit mono 16 kHz WAV as float64 samples in [-1, 1).");

  m.def(
      "log_gammatone",
      [](const Samples& samples, int sample_rate) {
        return to_array(extract(samples, sample_rate, asd::FrontendConfig::gammatone()));
      },
      py::arg("samples"), py::arg("sample_rate") = asd::kSampleRate,
      "64-band log-gammatone spectrogram, shape (64, frames); 40 ms windows with 50 % overlap.");

  m.def(
      "log_mel",
      [](const Samples& samples, int sample_rate) {
        return to_array(extract(samples, sample_rate, asd::FrontendConfig::mel()));
      },
      py::arg("samples"), py::arg("sample_rate") = asd::kSampleRate,
      "128-band log-Mel spectrogram, shape (128, frames); 64 ms windows with 50 % overlap.");

  m.def(
      "auc",
      [](std::vector<double> normal, std::vector<double> anomaly) {
        return asd::auc(evaluation_set(std::move(normal), std::move(anomaly), 1.0));
      },
      py::arg("normal"), py::arg("anomaly"), "Fraction of (anomaly, normal) pairs ranked correctly; ties count 0.");

  m.def(
      "pauc",
      [](std::vector<double> normal, std::vector<double> anomaly, double p) {
        return asd::pauc(evaluation_set(std::move(normal), std::move(anomaly), p));
      },
      py::arg("normal"), py::arg("anomaly"), py::arg("p") = asd::kDefaultMaxFpr,
      "AUC against the floor(p * len(normal)) highest-scoring normal clips.");

  m.def(
      "synth_clip",
      [](double f0, bool anomalous, double seconds, double noise_level, std::uint64_t seed) {
        return to_array(asd::synth_clip(asd::SynthMachine{"synth", f0}, anomalous, seconds, noise_level, seed).samples);
      },
      py::arg("f0") = 220.0, py::arg("anomalous") = false, py::arg("seconds") = 2.0, py::arg("noise_level") = 0.01,
      py::arg("seed") = 0, "Toy machine sound; anomalous clips carry broadband noise bursts.");

  m.def(
      "resolve_config",
      [](std::optional<fs::path> file, const std::vector<std::string>& overrides) {
        const asd::RunConfig c = asd::load_run_config(file, overrides);
        return py::make_tuple(c.to_yaml(), c.hash());
      },
      py::arg("file") = py::none(), py::arg("overrides") = std::vector<std::string>{},
      "Resolved run config as (yaml, run_hash).");

  m.def(
      "run_pipeline",
      [](std::optional<fs::path> file, const std::vector<std::string>& overrides) {
        const asd::RunConfig c = asd::load_run_config(file, overrides);
        if (c.manifest.empty()) throw asd::ConfigError("no manifest given (set manifest=...)");
        std::vector<asd::ScoreRecord> records;
        fs::path run_dir;
        {
          py::gil_scoped_release release;
          const auto entries = asd::ingest_manifest(c.manifest);
          const auto extracted = asd::extract_features(entries, c);
          if (!extracted.failures.empty()) throw asd::FormatError("feature extraction failed: " + extracted.failures[0]);
          asd::fit_norm(entries, c);
          run_dir = asd::run_train(c).run_dir;
          records = asd::run_score(c);
        }
        py::list scores;
        for (const auto& r : records) {
          py::dict d;
          d["clip_id"] = r.clip_id;
          d["machine_type"] = r.machine_type;
          d["machine_id"] = r.machine_id;
          d["label"] = std::string(asd::to_string(r.label));
          d["anomaly_score"] = r.anomaly_score;
          scores.append(d);
        }
        return py::make_tuple(run_dir, scores);
      },
      py::arg("file") = py::none(), py::arg("overrides") = std::vector<std::string>{},
      "Extract features, fit normalization, train and score the test split. Returns (run_dir, scores).");

  m.def(
      "write_synthetic_corpus",
      [](const fs::path& dir, std::size_t train_normal, std::size_t test_normal, std::size_t test_anomaly,
         double seconds, std::uint64_t seed) {
        asd::SynthCorpusSpec spec;
        spec.train_normal = train_normal;
        spec.test_normal = test_normal;
        spec.test_anomaly = test_anomaly;
        spec.seconds = seconds;
        spec.seed = seed;
        return asd::write_synthetic_corpus(dir, spec);
      },
      py::arg("dir"), py::arg("train_normal") = 60, py::arg("test_normal") = 20, py::arg("test_anomaly") = 20,
      py::arg("seconds") = 2.0, py::arg("seed") = 0, "Writes WAV files and manifest.csv; returns the manifest path.");

  m.def(
      "selftest",
      [](std::size_t seeds) {
        std::vector<asd::SelftestResult> results;
        {
          py::gil_scoped_release release;
          results = asd::run_selftest(seeds);
        }
        py::list out;
        for (const auto& r : results) out.append(py::make_tuple(r.name, r.passed, r.detail));
        return out;
      },
      py::arg("seeds") = 3, "Gradient checks and metric oracles as (name, passed, detail) tuples.");

  py::class_<Detector>(m, "Detector")
      .def(py::init<const fs::path&>(), py::arg("run_dir"))
      .def("score", &Detector::score, py::arg("samples"), py::arg("sample_rate") = asd::kSampleRate,
           "Anomaly score of one clip: mean reconstruction error over its segments.")
      .def("segment_errors", &Detector::segment_errors, py::arg("samples"),
           py::arg("sample_rate") = asd::kSampleRate)
      .def_property_readonly("family", &Detector::family)
      .def_property_readonly("checksum", &Detector::checksum)
      .def_property_readonly("run_hash", &Detector::run_hash)
      .def_property_readonly("run_dir", &Detector::run_dir);
}
