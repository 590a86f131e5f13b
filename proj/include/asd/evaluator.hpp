#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "asd/frontend.hpp"
#include "asd/model.hpp"

namespace asd {

enum class Label { normal, anomaly, unknown };

std::string_view to_string(Label label);
Label parse_label(std::string_view text);

struct ScoreRecord {
  std::string clip_id;
  std::string machine_type;
  std::string machine_id;
  Label label = Label::unknown;
  double anomaly_score = 0.0;
};

struct EvaluationSet {
  std::vector<double> normal_scores;
  std::vector<double> anomaly_scores;
  double p = 0.1;
};

inline constexpr double kDefaultMaxFpr = 0.1;

// Number of top-scoring normals entering the partial AUC, floor(p * N-).
// A 1e-9 slack keeps products such as 0.29 * 100 from flooring one short.
std::size_t pauc_normal_count(double p, std::size_t n_normal);

// Fraction of (normal, anomaly) pairs with anomaly score strictly greater;
// ties count 0. Computed by sorting and counting, exactly.
double auc(const EvaluationSet& set);
// Same, restricted to the floor(p * N-) highest-scoring normals.
double pauc(const EvaluationSet& set);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;
};

// Points for "score >= threshold" at every distinct score, from (0, 0) to
// (1, 1). Diagnostic only; the metrics above never use it.
std::vector<RocPoint> roc_curve(const EvaluationSet& set);

// Mean over segments of the per-segment reconstruction MSE of a normalized
// clip. The classification head, if any, is not run.
template <typename T>
double anomaly_score(ModelGraph<T>& model, const Spectrogram& clip, const NormStats& stats,
                     std::size_t frames_per_segment, std::size_t hop_frames);

// Per-segment (or per stacked vector) reconstruction errors of a clip that is
// already normalized.
template <typename T>
std::vector<double> segment_errors(ModelGraph<T>& model, const Spectrogram& normalized,
                                   std::size_t frames_per_segment, std::size_t hop_frames);

struct MachineResult {
  std::optional<double> auc;
  std::optional<double> pauc;
  std::size_t n_normal = 0;
  std::size_t n_anomaly = 0;
  std::string problem;  // why a cell is absent
};

struct CorpusResult {
  double p = kDefaultMaxFpr;
  std::map<std::string, MachineResult> machines;
};

// Per machine type AUC / pAUC. Records with an unknown label are ignored.
// A type without both classes, or with floor(p * N-) == 0, gets absent cells
// and a problem note instead of a number.
CorpusResult evaluate_corpus(const std::vector<ScoreRecord>& records, double p = kDefaultMaxFpr);

// Scores CSV: optional "# lineage: ..." first line, then
// clip_id,machine_type,machine_id,label,anomaly_score.
void write_scores_csv(const std::filesystem::path& path, const std::vector<ScoreRecord>& records,
                      const std::string& lineage);
std::vector<ScoreRecord> read_scores_csv(const std::filesystem::path& path, std::string* lineage = nullptr);

// One table row: framework name and a percent value (or absence) per type.
struct ResultRow {
  std::string framework;
  std::map<std::string, std::optional<double>> cells;  // percent
};

enum class Metric { auc, pauc };

ResultRow result_row(const std::string& framework, const CorpusResult& result, Metric metric);

// Rows are frameworks, columns machine types, values percent with 2 decimals;
// absent cells are written NA.
std::string results_csv(const std::vector<ResultRow>& rows, const std::vector<std::string>& columns,
                        const std::string& lineage);
std::vector<ResultRow> parse_results_csv(const std::string& text, std::vector<std::string>* columns,
                                         std::string* lineage = nullptr);
std::string pretty_table(const std::string& title, const std::vector<ResultRow>& rows,
                         const std::vector<std::string>& columns);

// Published reference numbers for comparison in reports (not computed here).
std::vector<ResultRow> reported_rows(Metric metric);
std::vector<std::string> dcase_machine_types();

}  // namespace asd
