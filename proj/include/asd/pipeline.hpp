#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "asd/evaluator.hpp"
#include "asd/frontend.hpp"
#include "asd/model.hpp"
#include "asd/trainer.hpp"

namespace asd {

// Process exit statuses of the asd tool, one per failing stage.
enum class ExitCode : int {
  ok = 0,
  failure = 1,  // selftest failure or an unexpected error
  config = 2,
  ingest = 3,
  features = 4,
  train = 5,
  score = 6,
  evaluate = 7,
};

// A stage could not run because an earlier one has not produced its output.
class PrerequisiteError : public Error {
 public:
  using Error::Error;
};

// Artifacts that disagree about which run, frontend or normalization they
// belong to.
class LineageError : public Error {
 public:
  using Error::Error;
};

enum class Split { train, test };

std::string_view to_string(Split split);

struct ManifestEntry {
  std::filesystem::path path;  // absolute after ingestion
  std::string machine_type;
  std::string machine_id;
  Split split = Split::train;
  Label label = Label::normal;
  std::size_t line = 0;  // 1-based line in the manifest
};

// Reads a CSV manifest with header path,machine_type,machine_id,split,label.
// Relative paths are taken relative to the manifest's directory. Every
// problem found is collected and thrown together as an IngestError.
std::vector<ManifestEntry> ingest_manifest(const std::filesystem::path& csv_path);
std::vector<ManifestEntry> parse_manifest(std::string_view text, const std::filesystem::path& base_dir,
                                          bool check_files = true);

// Everything a pipeline run needs. Loaded from YAML; any key can be
// overridden with a dotted path ("train.max_epochs=30").
struct RunConfig {
  std::uint64_t seed = 0;
  std::string manifest;
  std::string cache_dir = "cache";
  std::string run_dir = "runs/default";
  std::size_t workers = 1;

  // gammatone64, mel128 or auto (Mel for the dense baseline, else gammatone).
  std::string filterbank = "auto";
  std::size_t window = 0;  // samples; 0 = default of the filterbank
  std::size_t hop = 0;

  std::size_t segment_frames = 64;
  std::size_t segment_hop = 32;

  ModelFamily family = ModelFamily::unsupervised;
  std::vector<std::size_t> encoder_filters{32, 64, 128};
  std::size_t bottleneck = 128;
  double alpha = 1.0;
  double beta = 0.0;

  TrainConfig train;
  double p = kDefaultMaxFpr;

  void validate() const;
  FrontendConfig frontend() const;
  // Model configuration for a corpus whose training machine types are
  // class_names (sorted); only the semi-supervised family uses them.
  ModelConfig model_config(const std::vector<std::string>& class_names) const;

  std::string to_yaml() const;
  // Hash of the settings that determine results. Paths and the worker count
  // are excluded, so relocating a run does not change its lineage.
  std::string hash() const;

  std::filesystem::path cache_path() const;
  std::filesystem::path run_path() const;
};

// Defaults, then the YAML file (if given), then the overrides in order.
// Unknown keys are rejected.
RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                          const std::vector<std::string>& overrides = {});
RunConfig parse_run_config(std::string_view yaml_text, const std::vector<std::string>& overrides = {});

// Relative cache and run paths are placed under $ASD_HOME when it is set.
inline constexpr const char* kHomeVariable = "ASD_HOME";
std::filesystem::path resolve_home_path(const std::string& path);

std::string content_hash(const std::filesystem::path& file);
std::filesystem::path feature_path(const RunConfig& config, const std::string& clip_hash);

struct ExtractReport {
  std::size_t computed = 0;
  std::size_t cached = 0;
  std::vector<std::string> failures;  // "path: reason"
  // Feature file per manifest entry; empty where extraction failed.
  std::vector<std::filesystem::path> files;
};

// Extracts and caches features for every entry on a pool of
// config.workers threads. Unreadable clips are recorded, not thrown.
ExtractReport extract_features(const std::vector<ManifestEntry>& entries, const RunConfig& config,
                               std::ostream* log = nullptr);

// Cached features for each entry, throwing PrerequisiteError naming
// extract-features when one is missing.
std::vector<std::filesystem::path> cached_feature_files(const std::vector<ManifestEntry>& entries,
                                                        const RunConfig& config);

// Fits normalization statistics on the train-split clips and stores them
// under the cache, keyed by the frontend and the training clip set.
NormStats fit_norm(const std::vector<ManifestEntry>& entries, const RunConfig& config, std::ostream* log = nullptr);
std::filesystem::path norm_path(const std::vector<ManifestEntry>& entries, const RunConfig& config);

struct TrainOutcome {
  TrainHistory history;
  std::filesystem::path run_dir;
  std::size_t train_clips = 0;
  std::size_t val_clips = 0;
  std::size_t train_items = 0;
};

// Trains the configured model family and writes config.yaml, norm.json,
// best.ckpt, final.ckpt and history.csv into the run directory.
TrainOutcome run_train(const RunConfig& config, std::ostream* log = nullptr);

// Scores every test-split clip with the run's best checkpoint and writes
// scores.csv. Refuses checkpoints whose frontend or normalization differs
// from the current configuration.
std::vector<ScoreRecord> run_score(const RunConfig& config, std::ostream* log = nullptr);

struct EvaluateOutcome {
  CorpusResult result;
  std::vector<std::string> warnings;
  bool complete = true;  // false when some pAUC cell is undefined
};

// Reads one or more score files (all must share a lineage unless force is
// set), computes per-type AUC and pAUC and writes results_auc.csv and
// results_pauc.csv into out_dir.
EvaluateOutcome run_evaluate(const std::vector<std::filesystem::path>& score_files, double p,
                             const std::string& framework, const std::filesystem::path& out_dir, bool force,
                             std::ostream* log = nullptr);

// Short row name used in result tables: U, SS-0.7-0.3, B.
std::string framework_name(const RunConfig& config);

// Merges results CSVs (AUC or pAUC) from several runs into one table,
// optionally followed by the published reference rows.
std::string run_report(const std::vector<std::filesystem::path>& results_files, Metric metric, bool with_reported,
                       std::vector<ResultRow>* rows_out = nullptr, std::vector<std::string>* columns_out = nullptr);

// Writes a manifest for a DCASE-style tree: <root>/<type>/{train,test}/*.wav
// with file names such as normal_id_00_00000000.wav.
std::size_t write_dcase_manifest(const std::filesystem::path& root, const std::filesystem::path& out);

struct SelftestResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Gradient checks of every operator and a small composed model, each over
// `seeds` random draws, plus the metric oracles. About a second per 3 seeds.
std::vector<SelftestResult> run_selftest(std::size_t seeds = 3);

}  // namespace asd
