#include "asd/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "asd/errors.hpp"

namespace asd {

std::string_view to_string(Label label) {
  switch (label) {
    case Label::normal:
      return "normal";
    case Label::anomaly:
      return "anomaly";
    case Label::unknown:
      return "unknown";
  }
  return "unknown";
}

Label parse_label(std::string_view text) {
  if (text == "normal") return Label::normal;
  if (text == "anomaly") return Label::anomaly;
  if (text == "unknown") return Label::unknown;
  throw FormatError("bad label '" + std::string(text) + "' (expected normal, anomaly or unknown)");
}

// --- metrics

namespace {

void check_scores(const EvaluationSet& set) {
  if (set.normal_scores.empty() || set.anomaly_scores.empty()) {
    throw MetricError("AUC needs at least one normal and one anomalous score (got " +
                      std::to_string(set.normal_scores.size()) + " normal, " +
                      std::to_string(set.anomaly_scores.size()) + " anomalous)");
  }
  auto finite = [](double s) { return std::isfinite(s); };
  if (!std::all_of(set.normal_scores.begin(), set.normal_scores.end(), finite) ||
      !std::all_of(set.anomaly_scores.begin(), set.anomaly_scores.end(), finite)) {
    throw MetricError("anomaly scores must be finite");
  }
}

// Pairs (normal, anomaly) with anomaly > normal; `normals` sorted ascending.
std::uint64_t count_wins(const std::vector<double>& normals, const std::vector<double>& anomalies) {
  std::uint64_t wins = 0;
  for (double a : anomalies) {
    wins += static_cast<std::uint64_t>(std::lower_bound(normals.begin(), normals.end(), a) - normals.begin());
  }
  return wins;
}

}  // namespace

std::size_t pauc_normal_count(double p, std::size_t n_normal) {
  if (!(p > 0.0 && p <= 1.0)) throw MetricError("p must lie in (0, 1], got " + std::to_string(p));
  const auto k = static_cast<std::size_t>(std::floor(p * static_cast<double>(n_normal) + 1e-9));
  return std::min(k, n_normal);
}

double auc(const EvaluationSet& set) {
  check_scores(set);
  std::vector<double> normals = set.normal_scores;
  std::sort(normals.begin(), normals.end());
  const double pairs = static_cast<double>(normals.size()) * static_cast<double>(set.anomaly_scores.size());
  return static_cast<double>(count_wins(normals, set.anomaly_scores)) / pairs;
}

double pauc(const EvaluationSet& set) {
  check_scores(set);
  const std::size_t k = pauc_normal_count(set.p, set.normal_scores.size());
  if (k == 0) {
    throw MetricError("partial AUC with p=" + std::to_string(set.p) + " and " +
                      std::to_string(set.normal_scores.size()) +
                      " normal clips uses floor(p * N-) = 0 normals; increase p or the number of normal clips");
  }
  std::vector<double> normals = set.normal_scores;
  std::sort(normals.begin(), normals.end(), std::greater<>());
  normals.resize(k);
  std::sort(normals.begin(), normals.end());
  const double pairs = static_cast<double>(k) * static_cast<double>(set.anomaly_scores.size());
  return static_cast<double>(count_wins(normals, set.anomaly_scores)) / pairs;
}

std::vector<RocPoint> roc_curve(const EvaluationSet& set) {
  check_scores(set);
  std::vector<std::pair<double, bool>> all;  // (score, is_anomaly)
  for (double s : set.normal_scores) all.emplace_back(s, false);
  for (double s : set.anomaly_scores) all.emplace_back(s, true);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  const double nn = static_cast<double>(set.normal_scores.size());
  const double na = static_cast<double>(set.anomaly_scores.size());
  std::vector<RocPoint> out{{0.0, 0.0, INFINITY}};
  std::size_t fp = 0, tp = 0;
  for (std::size_t i = 0; i < all.size();) {
    const double threshold = all[i].first;
    for (; i < all.size() && all[i].first == threshold; ++i) (all[i].second ? tp : fp)++;
    out.push_back({static_cast<double>(fp) / nn, static_cast<double>(tp) / na, threshold});
  }
  return out;
}

// --- scoring

template <typename T>
std::vector<double> segment_errors(ModelGraph<T>& model, const Spectrogram& normalized,
                                   std::size_t frames_per_segment, std::size_t hop_frames) {
  Tensor<T> inputs;
  if (model.config.family == ModelFamily::baseline_dense) {
    const auto vectors = stack_frames(normalized, 2);
    const std::size_t dim = model.config.baseline.input_dim;
    inputs = Tensor<T>({vectors.size(), dim});
    for (std::size_t i = 0; i < vectors.size(); ++i) {
      if (vectors[i].size() != dim) throw ShapeError("stacked vector width does not match the model input");
      std::copy(vectors[i].begin(), vectors[i].end(), inputs.data() + i * dim);
    }
  } else {
    if (normalized.n_bins != model.config.ae.n_bins || frames_per_segment != model.config.ae.frames) {
      throw ShapeError("clip segments are " + std::to_string(normalized.n_bins) + "x" +
                       std::to_string(frames_per_segment) + ", model expects " + std::to_string(model.config.ae.n_bins) +
                       "x" + std::to_string(model.config.ae.frames));
    }
    inputs = segment_spectrogram<T>(normalized, frames_per_segment, hop_frames);
  }

  const std::size_t n = inputs.dim(0);
  const std::size_t per = inputs.size() / n;
  constexpr std::size_t kChunk = 64;
  std::vector<double> errors;
  errors.reserve(n);
  for (std::size_t begin = 0; begin < n; begin += kChunk) {
    const std::size_t count = std::min(kChunk, n - begin);
    Shape shape = inputs.shape();
    shape[0] = count;
    std::vector<T> slice(inputs.data() + begin * per, inputs.data() + (begin + count) * per);
    const Tensor<T> x(shape, std::move(slice));
    const ModelOutput<T> out = model.forward(x, Mode::inference, false);
    for (std::size_t s = 0; s < count; ++s) {
      double acc = 0.0;
      for (std::size_t i = s * per; i < (s + 1) * per; ++i) {
        const double d = static_cast<double>(out.reconstruction[i]) - static_cast<double>(x[i]);
        acc += d * d;
      }
      errors.push_back(acc / static_cast<double>(per));
    }
  }
  model.release_cache();
  return errors;
}

template <typename T>
double anomaly_score(ModelGraph<T>& model, const Spectrogram& clip, const NormStats& stats,
                     std::size_t frames_per_segment, std::size_t hop_frames) {
  if (clip.tag != model.metadata.frontend_tag) {
    throw ConfigError("clip features are " + std::string(to_string(clip.tag)) + " but the model expects " +
                      std::string(to_string(model.metadata.frontend_tag)));
  }
  if (stats.tag != clip.tag || stats.n_bins() != clip.n_bins) {
    throw ConfigError("normalization statistics do not match the clip features");
  }
  if (!model.metadata.norm_stats_hash.empty() && model.metadata.norm_stats_hash != stats.hash()) {
    throw ConfigError("normalization statistics " + stats.hash() + " differ from the ones the model was trained with (" +
                      model.metadata.norm_stats_hash + ")");
  }
  const auto errors = segment_errors(model, apply_norm(clip, stats), frames_per_segment, hop_frames);
  double sum = 0.0;
  for (double e : errors) sum += e;
  return sum / static_cast<double>(errors.size());
}

template std::vector<double> segment_errors<float>(ModelGraph<float>&, const Spectrogram&, std::size_t, std::size_t);
template std::vector<double> segment_errors<double>(ModelGraph<double>&, const Spectrogram&, std::size_t, std::size_t);
template double anomaly_score<float>(ModelGraph<float>&, const Spectrogram&, const NormStats&, std::size_t,
                                     std::size_t);
template double anomaly_score<double>(ModelGraph<double>&, const Spectrogram&, const NormStats&, std::size_t,
                                      std::size_t);

// --- corpus

CorpusResult evaluate_corpus(const std::vector<ScoreRecord>& records, double p) {
  pauc_normal_count(p, 0);  // validates p
  std::map<std::string, EvaluationSet> sets;
  for (const auto& r : records) {
    if (r.label == Label::unknown) continue;
    auto& set = sets[r.machine_type];
    set.p = p;
    (r.label == Label::normal ? set.normal_scores : set.anomaly_scores).push_back(r.anomaly_score);
  }
  CorpusResult result;
  result.p = p;
  for (const auto& [type, set] : sets) {
    MachineResult& m = result.machines[type];
    m.n_normal = set.normal_scores.size();
    m.n_anomaly = set.anomaly_scores.size();
    if (m.n_normal == 0 || m.n_anomaly == 0) {
      m.problem = "no " + std::string(m.n_normal == 0 ? "normal" : "anomalous") + " test clips";
      continue;
    }
    m.auc = auc(set);
    if (pauc_normal_count(p, m.n_normal) == 0) {
      m.problem = "floor(p * N-) = 0 with p=" + std::to_string(p) + " and " + std::to_string(m.n_normal) +
                  " normal clips; pAUC undefined";
      continue;
    }
    m.pauc = pauc(set);
  }
  return result;
}

// --- CSV

namespace {

std::string format_score(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string format_percent(const std::optional<double>& v) {
  if (!v) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

constexpr std::string_view kLineagePrefix = "# lineage: ";

}  // namespace

void write_scores_csv(const std::filesystem::path& path, const std::vector<ScoreRecord>& records,
                      const std::string& lineage) {
  std::string out;
  if (!lineage.empty()) out += std::string(kLineagePrefix) + lineage + "\n";
  out += "clip_id,machine_type,machine_id,label,anomaly_score\n";
  for (const auto& r : records) {
    out += r.clip_id + "," + r.machine_type + "," + r.machine_id + "," + std::string(to_string(r.label)) + "," +
           format_score(r.anomaly_score) + "\n";
  }
  write_file_atomic(path, out);
}

std::vector<ScoreRecord> read_scores_csv(const std::filesystem::path& path, std::string* lineage) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open scores file " + path.string());
  std::string line;
  std::size_t line_no = 0;
  std::vector<ScoreRecord> records;
  bool header_seen = false;
  if (lineage) lineage->clear();
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    if (line.rfind(kLineagePrefix, 0) == 0) {
      if (lineage) *lineage = line.substr(kLineagePrefix.size());
      continue;
    }
    if (line[0] == '#') continue;
    if (!header_seen) {
      if (line != "clip_id,machine_type,machine_id,label,anomaly_score") {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": unexpected header '" + line + "'");
      }
      header_seen = true;
      continue;
    }
    const auto cells = split_csv_line(line);
    if (cells.size() != 5) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 5 fields, got " +
                        std::to_string(cells.size()));
    }
    ScoreRecord r{cells[0], cells[1], cells[2], Label::unknown, 0.0};
    try {
      r.label = parse_label(cells[3]);
      std::size_t used = 0;
      r.anomaly_score = std::stod(cells[4], &used);
      if (used != cells[4].size()) throw FormatError("trailing characters");
    } catch (const std::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    records.push_back(std::move(r));
  }
  if (!header_seen) throw FormatError(path.string() + ": missing header");
  return records;
}

ResultRow result_row(const std::string& framework, const CorpusResult& result, Metric metric) {
  ResultRow row{framework, {}};
  for (const auto& [type, m] : result.machines) {
    const auto& v = metric == Metric::auc ? m.auc : m.pauc;
    row.cells[type] = v ? std::optional<double>(100.0 * *v) : std::nullopt;
  }
  return row;
}

std::string results_csv(const std::vector<ResultRow>& rows, const std::vector<std::string>& columns,
                        const std::string& lineage) {
  std::string out;
  if (!lineage.empty()) out += std::string(kLineagePrefix) + lineage + "\n";
  out += "framework";
  for (const auto& c : columns) out += "," + c;
  out += "\n";
  for (const auto& row : rows) {
    out += row.framework;
    for (const auto& c : columns) {
      const auto it = row.cells.find(c);
      out += "," + format_percent(it == row.cells.end() ? std::nullopt : it->second);
    }
    out += "\n";
  }
  return out;
}

std::vector<ResultRow> parse_results_csv(const std::string& text, std::vector<std::string>* columns,
                                         std::string* lineage) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> header;
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    line = strip_cr(line);
    if (line.empty()) continue;
    if (line.rfind(kLineagePrefix, 0) == 0) {
      if (lineage) *lineage = line.substr(kLineagePrefix.size());
      continue;
    }
    auto cells = split_csv_line(line);
    if (header.empty()) {
      if (cells.empty() || cells[0] != "framework") throw FormatError("results file lacks a framework header");
      header.assign(cells.begin() + 1, cells.end());
      continue;
    }
    if (cells.size() != header.size() + 1) throw FormatError("results row has the wrong number of cells: " + line);
    ResultRow row{cells[0], {}};
    for (std::size_t i = 0; i < header.size(); ++i) {
      row.cells[header[i]] = cells[i + 1] == "NA" ? std::nullopt : std::optional<double>(std::stod(cells[i + 1]));
    }
    rows.push_back(std::move(row));
  }
  if (columns) *columns = header;
  return rows;
}

std::string pretty_table(const std::string& title, const std::vector<ResultRow>& rows,
                         const std::vector<std::string>& columns) {
  std::size_t first = std::string("framework").size();
  for (const auto& r : rows) first = std::max(first, r.framework.size());
  std::vector<std::size_t> widths;
  for (const auto& c : columns) widths.push_back(std::max<std::size_t>(c.size(), 6));

  std::ostringstream out;
  auto pad = [&](const std::string& s, std::size_t w, bool left) {
    const std::string fill(w > s.size() ? w - s.size() : 0, ' ');
    out << (left ? s + fill : fill + s);
  };
  out << title << "\n";
  pad("framework", first, true);
  for (std::size_t i = 0; i < columns.size(); ++i) {
    out << "  ";
    pad(columns[i], widths[i], false);
  }
  out << "\n";
  for (const auto& r : rows) {
    pad(r.framework, first, true);
    for (std::size_t i = 0; i < columns.size(); ++i) {
      const auto it = r.cells.find(columns[i]);
      out << "  ";
      pad(format_percent(it == r.cells.end() ? std::nullopt : it->second), widths[i], false);
    }
    out << "\n";
  }
  return out.str();
}

std::vector<std::string> dcase_machine_types() { return {"ToyCar", "ToyConveyor", "fan", "pump", "slider", "valve"}; }

std::vector<ResultRow> reported_rows(Metric metric) {
  struct Entry {
    const char* name;
    double auc[6];
    double pauc[6];
  };
  // Reported, not computed: mean results over the DCASE 2020 Task 2
  // development test data, for side-by-side reading in `asd report`.
  static const Entry kEntries[] = {
      {"B*", {78.77, 72.53, 65.83, 72.89, 84.76, 66.28}, {67.58, 60.43, 52.45, 59.99, 66.53, 50.98}},
      {"U*", {95.67, 96.63, 79.87, 81.51, 80.86, 82.85}, {87.14, 90.45, 70.78, 70.99, 70.69, 71.62}},
      {"U FD*", {91.12, 93.36, 80.40, 82.61, 81.16, 83.19}, {73.41, 80.32, 72.56, 72.23, 69.94, 72.34}},
      {"SS-0.7-0.3*", {87.27, 90.35, 78.63, 80.33, 78.94, 80.94}, {74.21, 81.50, 71.26, 70.94, 70.08, 70.83}},
      {"SS-0.5-0.5*", {73.16, 80.82, 70.82, 71.84, 70.53, 71.77}, {60.42, 71.63, 60.32, 58.88, 58.51, 58.70}},
      {"SS-0.3-0.7*", {63.82, 74.65, 63.41, 64.09, 62.15, 64.18}, {55.58, 68.18, 57.33, 55.67, 55.07, 55.39}},
  };
  const auto types = dcase_machine_types();
  std::vector<ResultRow> rows;
  for (const auto& e : kEntries) {
    ResultRow row{e.name, {}};
    for (std::size_t i = 0; i < types.size(); ++i) row.cells[types[i]] = metric == Metric::auc ? e.auc[i] : e.pauc[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace asd
