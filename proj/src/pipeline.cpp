#include "asd/pipeline.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <random>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include "asd/checkpoint.hpp"
#include "asd/errors.hpp"
#include "asd/gradcheck.hpp"
#include "asd/hash.hpp"
#include "asd/layers.hpp"
#include "asd/ops.hpp"
#include "asd/rng.hpp"
#include "json.hpp"

namespace asd {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string_view::npos) return {};
  const auto end = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(begin, end - begin + 1));
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// Shortest text that reads back to the same double.
std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void say(std::ostream* log, const std::string& text) {
  if (log) *log << text << '\n' << std::flush;
}

// Runs fn(worker, index) for every index on up to `workers` threads. The
// first exception is rethrown after all threads finish.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t, std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(0, i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(w, i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// --- run config keys

// Every settable key with its current value, in document order.
std::vector<std::pair<std::string, std::string>> config_items(const RunConfig& c, bool with_paths) {
  std::vector<std::pair<std::string, std::string>> items;
  auto add = [&](std::string key, std::string value) { items.emplace_back(std::move(key), std::move(value)); };
  add("seed", std::to_string(c.seed));
  if (with_paths) {
    add("manifest", c.manifest.empty() ? "\"\"" : c.manifest);
    add("cache_dir", c.cache_dir);
    add("run_dir", c.run_dir);
    add("workers", std::to_string(c.workers));
  }
  add("frontend.filterbank", c.filterbank);
  add("frontend.window", std::to_string(c.window));
  add("frontend.hop", std::to_string(c.hop));
  add("segment.frames", std::to_string(c.segment_frames));
  add("segment.hop_frames", std::to_string(c.segment_hop));
  add("model.family", std::string(to_string(c.family)));
  std::string filters = "[";
  for (std::size_t i = 0; i < c.encoder_filters.size(); ++i) {
    filters += (i ? ", " : "") + std::to_string(c.encoder_filters[i]);
  }
  add("model.encoder_filters", filters + "]");
  add("model.bottleneck", std::to_string(c.bottleneck));
  add("model.alpha", format_double(c.alpha));
  add("model.beta", format_double(c.beta));
  add("train.batch_size", std::to_string(c.train.batch_size));
  add("train.max_epochs", std::to_string(c.train.max_epochs));
  add("train.lr", format_double(c.train.lr_initial));
  add("train.lr_factor", format_double(c.train.lr_factor));
  add("train.lr_patience", std::to_string(c.train.lr_patience));
  add("train.stop_patience", std::to_string(c.train.stop_patience));
  add("train.min_delta", format_double(c.train.min_delta));
  add("train.val_fraction", format_double(c.train.val_fraction));
  add("train.adam_beta1", format_double(c.train.adam.beta1));
  add("train.adam_beta2", format_double(c.train.adam.beta2));
  add("train.adam_eps", format_double(c.train.adam.eps));
  if (with_paths) add("eval.p", format_double(c.p));
  return items;
}

std::string items_to_yaml(const std::vector<std::pair<std::string, std::string>>& items) {
  std::string out;
  std::string section;
  for (const auto& [key, value] : items) {
    const auto dot = key.find('.');
    if (dot == std::string::npos) {
      section.clear();
      out += key + ": " + value + "\n";
      continue;
    }
    const std::string head = key.substr(0, dot);
    if (head != section) {
      out += head + ":\n";
      section = head;
    }
    out += "  " + key.substr(dot + 1) + ": " + value + "\n";
  }
  return out;
}

void flatten_yaml(const YAML::Node& node, const std::string& prefix, std::map<std::string, YAML::Node>& out) {
  if (node.IsMap()) {
    for (const auto& kv : node) {
      const std::string key = kv.first.as<std::string>();
      flatten_yaml(kv.second, prefix.empty() ? key : prefix + "." + key, out);
    }
    return;
  }
  out[prefix] = node;
}

template <typename V>
V scalar_as(const std::map<std::string, YAML::Node>& values, const std::string& key, V fallback) {
  const auto it = values.find(key);
  if (it == values.end()) return fallback;
  try {
    if constexpr (std::is_same_v<V, std::size_t> || std::is_same_v<V, std::uint64_t>) {
      const auto text = it->second.as<std::string>();
      if (!text.empty() && text.front() == '-') throw YAML::Exception(YAML::Mark::null_mark(), "negative");
    }
    return it->second.as<V>();
  } catch (const YAML::Exception&) {
    throw ConfigError("config key " + key + ": cannot read value '" +
                      (it->second.IsScalar() ? it->second.as<std::string>() : std::string("<non-scalar>")) + "'");
  }
}

RunConfig from_values(const std::map<std::string, YAML::Node>& v) {
  RunConfig c;
  const auto known = config_items(c, true);
  for (const auto& [key, node] : v) {
    const bool ok = std::any_of(known.begin(), known.end(), [&](const auto& item) { return item.first == key; });
    if (!ok) throw ConfigError("unknown config key: " + key);
  }
  c.seed = scalar_as<std::uint64_t>(v, "seed", c.seed);
  c.manifest = scalar_as<std::string>(v, "manifest", c.manifest);
  c.cache_dir = scalar_as<std::string>(v, "cache_dir", c.cache_dir);
  c.run_dir = scalar_as<std::string>(v, "run_dir", c.run_dir);
  c.workers = scalar_as<std::size_t>(v, "workers", c.workers);
  c.filterbank = scalar_as<std::string>(v, "frontend.filterbank", c.filterbank);
  c.window = scalar_as<std::size_t>(v, "frontend.window", c.window);
  c.hop = scalar_as<std::size_t>(v, "frontend.hop", c.hop);
  c.segment_frames = scalar_as<std::size_t>(v, "segment.frames", c.segment_frames);
  c.segment_hop = scalar_as<std::size_t>(v, "segment.hop_frames", c.segment_hop);
  c.family = parse_model_family(scalar_as<std::string>(v, "model.family", std::string(to_string(c.family))));
  if (const auto it = v.find("model.encoder_filters"); it != v.end()) {
    try {
      c.encoder_filters = it->second.as<std::vector<std::size_t>>();
    } catch (const YAML::Exception&) {
      throw ConfigError("config key model.encoder_filters must be a list of integers");
    }
  }
  c.bottleneck = scalar_as<std::size_t>(v, "model.bottleneck", c.bottleneck);
  c.alpha = scalar_as<double>(v, "model.alpha", c.alpha);
  c.beta = scalar_as<double>(v, "model.beta", c.beta);
  c.train.batch_size = scalar_as<std::size_t>(v, "train.batch_size", c.train.batch_size);
  c.train.max_epochs = scalar_as<std::size_t>(v, "train.max_epochs", c.train.max_epochs);
  c.train.lr_initial = scalar_as<double>(v, "train.lr", c.train.lr_initial);
  c.train.lr_factor = scalar_as<double>(v, "train.lr_factor", c.train.lr_factor);
  c.train.lr_patience = scalar_as<std::size_t>(v, "train.lr_patience", c.train.lr_patience);
  c.train.stop_patience = scalar_as<std::size_t>(v, "train.stop_patience", c.train.stop_patience);
  c.train.min_delta = scalar_as<double>(v, "train.min_delta", c.train.min_delta);
  c.train.val_fraction = scalar_as<double>(v, "train.val_fraction", c.train.val_fraction);
  c.train.adam.beta1 = scalar_as<double>(v, "train.adam_beta1", c.train.adam.beta1);
  c.train.adam.beta2 = scalar_as<double>(v, "train.adam_beta2", c.train.adam.beta2);
  c.train.adam.eps = scalar_as<double>(v, "train.adam_eps", c.train.adam.eps);
  c.p = scalar_as<double>(v, "eval.p", c.p);
  c.train.alpha = c.alpha;
  c.train.beta = c.beta;
  c.train.seed = c.seed;
  c.validate();
  return c;
}

// --- features

std::string hash_bytes(std::span<const std::byte> bytes) {
  Fnv1a h;
  h.update(bytes);
  return to_hex(h.digest());
}

std::vector<std::string> content_hashes(const std::vector<ManifestEntry>& entries, std::size_t workers) {
  std::vector<std::string> out(entries.size());
  parallel_for(entries.size(), workers, [&](std::size_t, std::size_t i) { out[i] = content_hash(entries[i].path); });
  return out;
}

std::vector<ManifestEntry> select_split(const std::vector<ManifestEntry>& entries, Split split) {
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
               [&](const ManifestEntry& e) { return e.split == split; });
  return out;
}

std::vector<ManifestEntry> load_manifest(const RunConfig& config) {
  if (config.manifest.empty()) throw ConfigError("no manifest configured (set manifest or pass --manifest)");
  return ingest_manifest(config.manifest);
}

std::vector<std::string> sorted_types(const std::vector<ManifestEntry>& entries) {
  std::set<std::string> types;
  for (const auto& e : entries) types.insert(e.machine_type);
  return {types.begin(), types.end()};
}

std::vector<std::string> ordered_columns(const std::set<std::string>& present) {
  std::vector<std::string> columns;
  for (const auto& t : dcase_machine_types()) {
    if (present.count(t)) columns.push_back(t);
  }
  for (const auto& t : present) {
    if (std::find(columns.begin(), columns.end(), t) == columns.end()) columns.push_back(t);
  }
  return columns;
}

}  // namespace

// --- manifest

std::string_view to_string(Split split) { return split == Split::train ? "train" : "test"; }

std::vector<ManifestEntry> parse_manifest(std::string_view text, const fs::path& base_dir, bool check_files) {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> problems;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped.front() == '#') continue;
    const auto cells = split_commas(stripped);
    if (!header_seen) {
      header_seen = true;
      const std::vector<std::string> expected{"path", "machine_type", "machine_id", "split", "label"};
      if (cells != expected) {
        throw IngestError({"line " + std::to_string(line_no) +
                           ": header must be path,machine_type,machine_id,split,label"});
      }
      continue;
    }
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (cells.size() != 5) {
      problems.push_back(where + "expected 5 fields, found " + std::to_string(cells.size()));
      continue;
    }
    ManifestEntry e;
    e.line = line_no;
    e.machine_type = cells[1];
    e.machine_id = cells[2];
    bool ok = true;
    if (cells[0].empty()) {
      problems.push_back(where + "empty path");
      ok = false;
    }
    if (e.machine_type.empty()) {
      problems.push_back(where + "empty machine_type");
      ok = false;
    }
    if (cells[3] == "train") {
      e.split = Split::train;
    } else if (cells[3] == "test") {
      e.split = Split::test;
    } else {
      problems.push_back(where + "split must be train or test, got '" + cells[3] + "'");
      ok = false;
    }
    try {
      e.label = parse_label(cells[4]);
    } catch (const Error&) {
      problems.push_back(where + "label must be normal, anomaly or unknown, got '" + cells[4] + "'");
      ok = false;
    }
    if (ok && e.split == Split::train && e.label != Label::normal) {
      problems.push_back(where + "train-split clips must be labeled normal (got " + std::string(to_string(e.label)) +
                         ")");
      ok = false;
    }
    if (!cells[0].empty()) {
      fs::path p(cells[0]);
      if (p.is_relative()) p = base_dir / p;
      e.path = p.lexically_normal();
      if (!seen.insert(e.path.string()).second) {
        problems.push_back(where + "duplicate path " + cells[0]);
        ok = false;
      } else if (check_files) {
        std::ifstream probe(e.path, std::ios::binary);
        if (!probe) {
          problems.push_back(where + "cannot read " + e.path.string());
          ok = false;
        }
      }
    }
    if (ok) entries.push_back(std::move(e));
  }
  if (!header_seen || (entries.empty() && problems.empty())) throw IngestError({"no entries"});
  if (!problems.empty()) throw IngestError(std::move(problems));
  return entries;
}

std::vector<ManifestEntry> ingest_manifest(const fs::path& csv_path) {
  std::ifstream in(csv_path, std::ios::binary);
  if (!in) throw IngestError({"cannot open manifest " + csv_path.string()});
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str(), fs::absolute(csv_path).parent_path());
}

// --- run config

void RunConfig::validate() const {
  if (filterbank != "auto" && filterbank != "gammatone64" && filterbank != "mel128") {
    throw ConfigError("frontend.filterbank must be auto, gammatone64 or mel128");
  }
  if (workers == 0) throw ConfigError("workers must be at least 1");
  if (segment_frames == 0 || segment_hop == 0) throw ConfigError("segment frames and hop must be positive");
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("eval.p must lie in (0, 1]");
  TrainConfig t = train;
  t.alpha = alpha;
  t.beta = beta;
  t.validate();
  frontend().validate();
  model_config(family == ModelFamily::semisupervised ? std::vector<std::string>{"a", "b"}
                                                     : std::vector<std::string>{})
      .validate();
}

FrontendConfig RunConfig::frontend() const {
  std::string bank = filterbank;
  if (bank == "auto") bank = family == ModelFamily::baseline_dense ? "mel128" : "gammatone64";
  FrontendConfig f = bank == "mel128" ? FrontendConfig::mel() : FrontendConfig::gammatone();
  if (window) f.window = window;
  if (hop) f.hop = hop;
  if (f.window > f.n_fft) {
    std::size_t n = 1;
    while (n < f.window) n <<= 1;
    f.n_fft = n;
  }
  return f;
}

ModelConfig RunConfig::model_config(const std::vector<std::string>& class_names) const {
  ModelConfig m;
  m.family = family;
  const FrontendConfig f = frontend();
  if (family == ModelFamily::baseline_dense) {
    m.baseline.input_dim = f.n_filters * 5;
    return m;
  }
  m.ae.n_bins = f.n_filters;
  m.ae.frames = segment_frames;
  m.ae.encoder_filters = encoder_filters;
  m.ae.bottleneck = bottleneck;
  m.ae.alpha = alpha;
  m.ae.beta = beta;
  if (family == ModelFamily::semisupervised) m.ae.class_names = class_names;
  return m;
}

std::string RunConfig::to_yaml() const { return items_to_yaml(config_items(*this, true)); }

std::string RunConfig::hash() const {
  // The resolved frontend is hashed in place of the frontend.* keys, so an
  // explicit and an implied filterbank (or window) give the same lineage.
  auto items = config_items(*this, false);
  std::erase_if(items, [](const auto& item) { return item.first.starts_with("frontend."); });
  return to_hex(fnv1a(items_to_yaml(items) + frontend().canonical()));
}

fs::path resolve_home_path(const std::string& path) {
  fs::path p(path);
  if (p.is_absolute()) return p;
  if (const char* home = std::getenv(kHomeVariable); home && *home) return fs::path(home) / p;
  return p;
}

fs::path RunConfig::cache_path() const { return resolve_home_path(cache_dir); }
fs::path RunConfig::run_path() const { return resolve_home_path(run_dir); }

RunConfig parse_run_config(std::string_view yaml_text, const std::vector<std::string>& overrides) {
  std::map<std::string, YAML::Node> values;
  try {
    const YAML::Node root = YAML::Load(std::string(yaml_text));
    if (root.IsDefined() && !root.IsNull()) {
      if (!root.IsMap()) throw ConfigError("config document must be a mapping");
      flatten_yaml(root, "", values);
    }
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value, got '" + o + "'");
      const std::string key = trim(o.substr(0, eq));
      const std::string value = trim(o.substr(eq + 1));
      values[key] = value.empty() ? YAML::Node(std::string()) : YAML::Load(value);
    }
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config is not valid YAML: ") + e.what());
  }
  return from_values(values);
}

RunConfig load_run_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
  std::string text;
  if (file) {
    std::ifstream in(*file, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file " + file->string());
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  return parse_run_config(text, overrides);
}

// --- features

std::string content_hash(const fs::path& file) { return hash_bytes(read_file_bytes(file)); }

fs::path feature_path(const RunConfig& config, const std::string& clip_hash) {
  return config.cache_path() / "features" / config.frontend().hash() / (clip_hash + ".feat");
}

ExtractReport extract_features(const std::vector<ManifestEntry>& entries, const RunConfig& config, std::ostream* log) {
  const FrontendConfig frontend = config.frontend();
  const std::size_t workers = std::max<std::size_t>(1, std::min(config.workers, entries.size()));
  std::vector<std::unique_ptr<FeatureExtractor>> extractors;
  for (std::size_t w = 0; w < workers; ++w) extractors.push_back(std::make_unique<FeatureExtractor>(frontend));

  ExtractReport report;
  report.files.resize(entries.size());
  std::vector<std::string> errors(entries.size());
  std::atomic<std::size_t> computed{0}, cached{0};
  parallel_for(entries.size(), workers, [&](std::size_t w, std::size_t i) {
    const ManifestEntry& e = entries[i];
    try {
      const auto bytes = read_file_bytes(e.path);
      const fs::path target = feature_path(config, hash_bytes(bytes));
      if (fs::exists(target)) {
        ++cached;
      } else {
        write_feature_file(target, extractors[w]->extract(decode_wav(bytes)));
        ++computed;
      }
      report.files[i] = target;
    } catch (const std::exception& ex) {
      errors[i] = e.path.string() + ": " + ex.what();
    }
  });
  for (const auto& err : errors) {
    if (!err.empty()) report.failures.push_back(err);
  }
  report.computed = computed;
  report.cached = cached;
  say(log, "features (" + std::string(to_string(frontend.tag)) + ", " + frontend.hash() + "): " +
               std::to_string(report.computed) + " computed, " + std::to_string(report.cached) + " cached, " +
               std::to_string(report.failures.size()) + " failed");
  for (const auto& f : report.failures) say(log, "  failed: " + f);
  return report;
}

std::vector<fs::path> cached_feature_files(const std::vector<ManifestEntry>& entries, const RunConfig& config) {
  const auto hashes = content_hashes(entries, config.workers);
  std::vector<fs::path> files;
  std::size_t missing = 0;
  std::string first;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    files.push_back(feature_path(config, hashes[i]));
    if (!fs::exists(files.back())) {
      if (missing++ == 0) first = entries[i].path.string();
    }
  }
  if (missing) {
    throw PrerequisiteError(std::to_string(missing) + " clip(s) have no cached features (first: " + first +
                            "); run `asd extract-features` with the same config first");
  }
  return files;
}

fs::path norm_path(const std::vector<ManifestEntry>& entries, const RunConfig& config) {
  const auto train = select_split(entries, Split::train);
  auto hashes = content_hashes(train, config.workers);
  std::sort(hashes.begin(), hashes.end());
  Fnv1a h;
  for (const auto& s : hashes) h.update(s + "\n");
  return config.cache_path() / "norm" / (config.frontend().hash() + "-" + to_hex(h.digest()) + ".json");
}

NormStats fit_norm(const std::vector<ManifestEntry>& entries, const RunConfig& config, std::ostream* log) {
  const auto train = select_split(entries, Split::train);
  if (train.empty()) throw ConfigError("manifest has no train-split clips to fit normalization on");
  const auto files = cached_feature_files(train, config);
  // Files are read in parallel blocks but accumulated in manifest order, so
  // the statistics do not depend on the worker count.
  NormAccumulator acc;
  constexpr std::size_t kBlock = 64;
  for (std::size_t begin = 0; begin < files.size(); begin += kBlock) {
    const std::size_t count = std::min(kBlock, files.size() - begin);
    std::vector<Spectrogram> block(count);
    parallel_for(count, config.workers, [&](std::size_t, std::size_t i) { block[i] = read_feature_file(files[begin + i]); });
    for (const auto& s : block) acc.add(s);
  }
  const NormStats stats = acc.finish();
  const fs::path path = norm_path(entries, config);
  save_norm_stats(path, stats);
  say(log, "normalization: " + std::to_string(stats.n_frames_fitted) + " frames from " + std::to_string(train.size()) +
               " train clips -> " + path.string());
  return stats;
}

// --- train

std::string framework_name(const RunConfig& config) {
  switch (config.family) {
    case ModelFamily::unsupervised:
      return "U";
    case ModelFamily::baseline_dense:
      return "B";
    case ModelFamily::semisupervised:
      return "SS-" + format_double(config.alpha) + "-" + format_double(config.beta);
  }
  return "?";
}

TrainOutcome run_train(const RunConfig& config, std::ostream* log) {
  config.validate();
  const auto entries = load_manifest(config);
  const auto train_entries = select_split(entries, Split::train);
  if (train_entries.size() < 2) throw ConfigError("need at least 2 train-split clips");
  const auto files = cached_feature_files(train_entries, config);
  const fs::path stats_file = norm_path(entries, config);
  if (!fs::exists(stats_file)) {
    throw PrerequisiteError("no normalization statistics for this training set; run `asd fit-norm` first");
  }
  const NormStats stats = load_norm_stats(stats_file);

  const auto class_names = sorted_types(train_entries);
  const ModelConfig model_config = config.model_config(class_names);
  model_config.validate();

  std::vector<std::string> groups;
  for (const auto& e : train_entries) groups.push_back(e.machine_type);
  const SplitResult split = split_train_val(groups, config.train.val_fraction, config.seed);

  const FrontendConfig frontend = config.frontend();
  auto make_dataset = [&] {
    return config.family == ModelFamily::baseline_dense
               ? FeatureDataset::stacked(frontend.n_filters, 2)
               : FeatureDataset::segments(frontend.n_filters, config.segment_frames, config.segment_hop);
  };
  FeatureDataset train_set = make_dataset();
  FeatureDataset val_set = make_dataset();
  std::vector<ClipFeatures> clips(train_entries.size());
  parallel_for(train_entries.size(), config.workers, [&](std::size_t, std::size_t i) {
    const auto type_it = std::lower_bound(class_names.begin(), class_names.end(), train_entries[i].machine_type);
    const int label = config.family == ModelFamily::semisupervised ? static_cast<int>(type_it - class_names.begin()) : -1;
    clips[i] = to_clip_features(apply_norm(read_feature_file(files[i]), stats), label);
  });
  for (std::size_t i : split.train) train_set.add_clip(clips[i]);
  for (std::size_t i : split.val) val_set.add_clip(clips[i]);
  clips.clear();

  auto model = build_model<float>(model_config, config.seed);
  model.metadata.config_hash = model_config.hash();
  model.metadata.frontend_tag = frontend.tag;
  model.metadata.frontend_hash = frontend.hash();
  model.metadata.norm_stats_hash = stats.hash();
  model.metadata.run_config_hash = config.hash();

  const fs::path run = config.run_path();
  fs::create_directories(run);
  write_file_atomic(run / "config.yaml", config.to_yaml());
  save_norm_stats(run / "norm.json", stats);

  TrainConfig tc = config.train;
  tc.alpha = config.alpha;
  tc.beta = config.beta;
  tc.seed = config.seed;

  say(log, "training " + framework_name(config) + " (" + std::string(to_string(config.family)) + ", " +
               std::to_string(model.parameter_count()) + " parameters) on " + std::to_string(train_set.size()) +
               " items from " + std::to_string(split.train.size()) + " clips, validating on " +
               std::to_string(val_set.size()) + " items from " + std::to_string(split.val.size()) + " clips");

  nlohmann::json extra;
  extra["class_names"] = class_names;
  extra["framework"] = framework_name(config);

  TrainHooks hooks;
  double best = std::numeric_limits<double>::infinity();
  hooks.on_epoch = [&](const EpochRecord& r) {
    const bool improved = r.val_loss < best;
    if (improved) best = r.val_loss;
    char line[200];
    std::snprintf(line, sizeof(line), "epoch %4zu/%zu  train %.6f  val %.6f  lr %.3g%s", r.epoch, tc.max_epochs,
                  r.train_loss, r.val_loss, r.lr, improved ? "  *" : "");
    say(log, line);
  };
  hooks.on_final = [&] {
    nlohmann::json fin = extra;
    fin["kind"] = "final";
    save_checkpoint(run / "final.ckpt", model, fin);
  };

  TrainOutcome outcome;
  outcome.history = train(model, train_set, val_set, tc, hooks);
  outcome.run_dir = run;
  outcome.train_clips = split.train.size();
  outcome.val_clips = split.val.size();
  outcome.train_items = train_set.size();

  extra["kind"] = "best";
  extra["best_epoch"] = outcome.history.best_epoch;
  extra["stop_reason"] = std::string(to_string(outcome.history.stop_reason));
  save_checkpoint(run / "best.ckpt", model, extra);
  outcome.history.write_csv(run / "history.csv");
  say(log, "best epoch " + std::to_string(outcome.history.best_epoch) + " (val " +
               format_double(outcome.history.best_val_loss()) + "), stopped by " +
               std::string(to_string(outcome.history.stop_reason)) + "; wrote " + run.string());
  return outcome;
}

// --- score

std::vector<ScoreRecord> run_score(const RunConfig& config, std::ostream* log) {
  config.validate();
  const fs::path run = config.run_path();
  const fs::path ckpt = run / "best.ckpt";
  if (!fs::exists(ckpt)) throw PrerequisiteError("no checkpoint at " + ckpt.string() + "; run `asd train` first");
  std::string checksum;
  auto model = load_checkpoint_as<float>(ckpt, &checksum);

  const FrontendConfig frontend = config.frontend();
  if (model.metadata.frontend_hash != frontend.hash()) {
    throw LineageError("checkpoint was trained on frontend " + model.metadata.frontend_hash + " (" +
                       std::string(to_string(model.metadata.frontend_tag)) + ") but the config resolves to " +
                       frontend.hash() + "; refusing to score");
  }
  const fs::path stats_file = run / "norm.json";
  if (!fs::exists(stats_file)) throw PrerequisiteError("missing " + stats_file.string() + "; rerun `asd train`");
  const NormStats stats = load_norm_stats(stats_file);
  if (stats.hash() != model.metadata.norm_stats_hash) {
    throw LineageError("normalization statistics in " + stats_file.string() + " do not match the checkpoint");
  }

  const auto entries = select_split(load_manifest(config), Split::test);
  if (entries.empty()) throw ConfigError("manifest has no test-split clips to score");
  const auto files = cached_feature_files(entries, config);

  const std::size_t workers = std::max<std::size_t>(1, std::min(config.workers, entries.size()));
  std::vector<ModelGraph<float>> models(workers, model);
  std::vector<ScoreRecord> records(entries.size());
  parallel_for(entries.size(), workers, [&](std::size_t w, std::size_t i) {
    const ManifestEntry& e = entries[i];
    const Spectrogram spec = read_feature_file(files[i]);
    const double score = anomaly_score(models[w], spec, stats, config.segment_frames, config.segment_hop);
    if (!std::isfinite(score)) throw TrainingError("non-finite anomaly score for " + e.path.string());
    records[i] = {e.path.filename().string(), e.machine_type, e.machine_id, e.label, score};
  });
  write_scores_csv(run / "scores.csv", records, model.metadata.run_config_hash);
  say(log, "scored " + std::to_string(records.size()) + " test clips with " + ckpt.string() + " (" + checksum +
               ") -> " + (run / "scores.csv").string());
  return records;
}

// --- evaluate

EvaluateOutcome run_evaluate(const std::vector<fs::path>& score_files, double p, const std::string& framework,
                             const fs::path& out_dir, bool force, std::ostream* log) {
  if (score_files.empty()) throw ConfigError("no score files given");
  pauc_normal_count(p, 0);
  std::vector<ScoreRecord> records;
  std::set<std::string> lineages;
  for (const auto& f : score_files) {
    if (!fs::exists(f)) throw PrerequisiteError("missing " + f.string() + "; run `asd score` first");
    std::string lineage;
    auto part = read_scores_csv(f, &lineage);
    lineages.insert(lineage.empty() ? "<none>" : lineage);
    records.insert(records.end(), part.begin(), part.end());
  }
  if (lineages.size() > 1 && !force) {
    std::string list;
    for (const auto& l : lineages) list += (list.empty() ? "" : ", ") + l;
    throw LineageError("score files come from different runs (lineage " + list + "); pass --force to combine them");
  }
  std::string lineage;
  for (const auto& l : lineages) lineage += (lineage.empty() ? "" : "+") + l;

  EvaluateOutcome outcome;
  outcome.result = evaluate_corpus(records, p);
  std::set<std::string> types;
  for (const auto& [type, m] : outcome.result.machines) {
    types.insert(type);
    if (!m.problem.empty()) outcome.warnings.push_back(type + ": " + m.problem);
    if (m.auc && !m.pauc) outcome.complete = false;
  }
  const auto columns = ordered_columns(types);
  const ResultRow auc_row = result_row(framework, outcome.result, Metric::auc);
  const ResultRow pauc_row = result_row(framework, outcome.result, Metric::pauc);
  fs::create_directories(out_dir);
  write_file_atomic(out_dir / "results_auc.csv", results_csv({auc_row}, columns, lineage));
  write_file_atomic(out_dir / "results_pauc.csv", results_csv({pauc_row}, columns, lineage));
  if (log) {
    *log << pretty_table("AUC (%)", {auc_row}, columns) << '\n';
    *log << pretty_table("pAUC (%), p=" + format_double(p), {pauc_row}, columns) << '\n';
    for (const auto& w : outcome.warnings) *log << "warning: " << w << '\n';
    *log << std::flush;
  }
  return outcome;
}

std::string run_report(const std::vector<fs::path>& results_files, Metric metric, bool with_reported,
                       std::vector<ResultRow>* rows_out, std::vector<std::string>* columns_out) {
  std::vector<ResultRow> rows;
  std::set<std::string> present;
  for (const auto& f : results_files) {
    std::vector<std::string> cols;
    auto part = parse_results_csv(read_text(f), &cols);
    present.insert(cols.begin(), cols.end());
    rows.insert(rows.end(), part.begin(), part.end());
  }
  auto columns = ordered_columns(present);
  if (with_reported) {
    if (columns.empty()) columns = dcase_machine_types();
    for (auto& r : reported_rows(metric)) rows.push_back(std::move(r));
  }
  const std::string title = metric == Metric::auc ? "AUC (%)" : "pAUC (%)";
  std::string text = pretty_table(title, rows, columns);
  if (with_reported) text += "* published reference values, not computed by this run\n";
  if (rows_out) *rows_out = rows;
  if (columns_out) *columns_out = columns;
  return text;
}

// --- DCASE manifest

std::size_t write_dcase_manifest(const fs::path& root, const fs::path& out) {
  if (!fs::is_directory(root)) throw IngestError({"not a directory: " + root.string()});
  static const std::regex id_re("id_([0-9]+)");
  std::vector<fs::path> type_dirs;
  for (const auto& d : fs::directory_iterator(root)) {
    if (d.is_directory()) type_dirs.push_back(d.path());
  }
  std::sort(type_dirs.begin(), type_dirs.end());
  std::string text = "path,machine_type,machine_id,split,label\n";
  std::size_t count = 0;
  for (const auto& dir : type_dirs) {
    const std::string type = dir.filename().string();
    for (const std::string split : {"train", "test"}) {
      const fs::path sub = dir / split;
      if (!fs::is_directory(sub)) continue;
      std::vector<fs::path> wavs;
      for (const auto& f : fs::directory_iterator(sub)) {
        if (f.is_regular_file() && f.path().extension() == ".wav") wavs.push_back(f.path());
      }
      std::sort(wavs.begin(), wavs.end());
      for (const auto& w : wavs) {
        const std::string name = w.filename().string();
        std::string label = "unknown";
        if (name.rfind("normal_", 0) == 0) label = "normal";
        if (name.rfind("anomaly_", 0) == 0) label = "anomaly";
        if (split == "train") {
          if (label == "anomaly") continue;  // not expected in a train fold
          label = "normal";
        }
        std::smatch m;
        const std::string id = std::regex_search(name, m, id_re) ? "id_" + m[1].str() : "unknown";
        text += fs::absolute(w).string() + "," + type + "," + id + "," + split + "," + label + "\n";
        ++count;
      }
    }
  }
  if (count == 0) throw IngestError({"no <type>/{train,test}/*.wav files under " + root.string()});
  write_file_atomic(out, text);
  return count;
}

// --- selftest

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

SelftestResult gradient_result(const std::string& name, const std::vector<GradCheckReport>& reports) {
  double worst = 0.0;
  std::size_t checked = 0;
  for (const auto& r : reports) {
    worst = std::max(worst, r.max_rel_error);
    checked += r.checked;
  }
  char detail[160];
  std::snprintf(detail, sizeof(detail), "max rel error %.2e over %zu probes", worst, checked);
  return {name, worst < 1e-4 && checked > 0, detail};
}

template <typename Build>
SelftestResult check_layer(const std::string& name, std::size_t seeds, Shape input_shape, Mode mode, Build build) {
  std::vector<GradCheckReport> reports;
  for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
    Rng rng(seed);
    Sequential<double> net;
    build(net, rng);
    GradCheckOptions opts;
    opts.seed = seed;
    reports.push_back(check_sequential(net, random_tensor(input_shape, rng), mode, opts));
  }
  return gradient_result(name, reports);
}

template <typename Loss>
SelftestResult check_loss(const std::string& name, std::size_t seeds, Loss loss_fn) {
  std::vector<GradCheckReport> reports;
  for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
    Rng rng(seed);
    Tensor<double> x = random_tensor({4, 5}, rng);
    const Tensor<double> target = random_tensor({4, 5}, rng);
    const auto base = loss_fn(x, target);
    const std::vector<double> analytic(base.grad.values().begin(), base.grad.values().end());
    GradCheckOptions opts;
    opts.seed = seed;
    reports.push_back(gradient_check({{"x", x.values(), analytic}}, [&] { return loss_fn(x, target).value; }, {}, opts));
  }
  return gradient_result(name, reports);
}

}  // namespace

std::vector<SelftestResult> run_selftest(std::size_t seeds) {
  if (seeds == 0) throw ConfigError("selftest needs at least one seed");
  std::vector<SelftestResult> out;
  out.push_back(check_layer("grad conv2d", seeds, {2, 2, 6, 6}, Mode::train, [](Sequential<double>& n, Rng& rng) {
    n.add<Conv2dLayer<double>>("conv", 2, 3).initialize(rng);
  }));
  out.push_back(check_layer("grad batchnorm (train mode)", seeds, {4, 3, 4, 4}, Mode::train,
                            [](Sequential<double>& n, Rng&) { n.add<BatchNormLayer<double>>("bn", 3); }));
  out.push_back(check_layer("grad relu", seeds, {3, 10}, Mode::train,
                            [](Sequential<double>& n, Rng&) { n.add<ReluLayer<double>>("relu"); }));
  out.push_back(check_layer("grad maxpool", seeds, {2, 2, 6, 6}, Mode::train,
                            [](Sequential<double>& n, Rng&) { n.add<MaxPoolLayer<double>>("pool"); }));
  out.push_back(check_layer("grad upsample", seeds, {2, 2, 3, 3}, Mode::train,
                            [](Sequential<double>& n, Rng&) { n.add<UpsampleLayer<double>>("up"); }));
  out.push_back(check_layer("grad dense", seeds, {3, 5}, Mode::train, [](Sequential<double>& n, Rng& rng) {
    n.add<DenseLayer<double>>("dense", 5, 4).initialize(rng);
  }));
  out.push_back(check_loss("grad mse", seeds, [](const Tensor<double>& x, const Tensor<double>& t) { return mse_loss(x, t); }));
  out.push_back(check_loss("grad softmax-cce", seeds, [](const Tensor<double>& x, const Tensor<double>&) {
    const std::vector<int> labels{0, 3, 4, 1};
    return softmax_cce_loss(x, std::span<const int>(labels));
  }));

  {
    AEConfig tiny;
    tiny.n_bins = 16;
    tiny.frames = 16;
    tiny.encoder_filters = {2, 3, 4};
    tiny.bottleneck = 8;
    std::vector<GradCheckReport> reports;
    for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
      auto model = build_unsupervised<double>(tiny, seed);
      Rng rng(seed + 100);
      GradCheckOptions opts;
      opts.seed = seed;
      reports.push_back(check_model(model, random_tensor({3, 1, 16, 16}, rng), Mode::train, opts));
    }
    out.push_back(gradient_result("grad composed autoencoder", reports));
  }

  {
    std::mt19937_64 gen(2020);
    std::uniform_int_distribution<std::size_t> count(1, 50);
    std::uniform_int_distribution<int> level(0, 20);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
      EvaluationSet s;
      s.p = 1.0;
      const std::size_t nn = count(gen), na = count(gen);
      for (std::size_t i = 0; i < nn; ++i) s.normal_scores.push_back(level(gen) / 20.0);
      for (std::size_t i = 0; i < na; ++i) s.anomaly_scores.push_back((level(gen) + 2) / 20.0);
      double hits = 0.0;
      for (double a : s.anomaly_scores) {
        for (double n : s.normal_scores) hits += a > n ? 1.0 : 0.0;
      }
      const double oracle = hits / static_cast<double>(nn * na);
      worst = std::max({worst, std::abs(auc(s) - oracle), std::abs(pauc(s) - oracle)});
    }
    char detail[100];
    std::snprintf(detail, sizeof(detail), "200 sets, max deviation from pairwise sum %.1e", worst);
    out.push_back({"metric oracle", worst <= 1e-12, detail});
  }
  return out;
}

}  // namespace asd
