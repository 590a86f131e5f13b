#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "asd/checkpoint.hpp"
#include "asd/pipeline.hpp"
#include "asd/synth.hpp"
#include "doctest.h"

using namespace asd;
namespace fs = std::filesystem;

namespace {

// Fresh scratch directory per test case, removed on exit.
struct ScratchDir {
  fs::path path;
  explicit ScratchDir(const std::string& name) {
    path = fs::temp_directory_path() / ("asd_test_pipeline_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A corpus small enough to train on in well under a second: half-second
// clips (24 frames) cut into 16-frame segments, and a three-channel network.
fs::path tiny_corpus(const fs::path& dir, std::size_t types = 2) {
  SynthCorpusSpec spec;
  spec.machines.clear();
  for (std::size_t i = 0; i < types; ++i) spec.machines.push_back({"m" + std::to_string(i), 200.0 + 90.0 * i});
  spec.train_normal = 10;
  spec.test_normal = 10;
  spec.test_anomaly = 4;
  spec.seconds = 0.5;
  spec.seed = 3;
  return write_synthetic_corpus(dir / "corpus", spec);
}

RunConfig tiny_config(const fs::path& dir, const fs::path& manifest, const std::string& run = "run") {
  return parse_run_config("", {"manifest=" + manifest.string(), "cache_dir=" + (dir / "cache").string(),
                               "run_dir=" + (dir / run).string(), "segment.frames=16", "segment.hop_frames=8",
                               "model.encoder_filters=[2, 2, 2]", "model.bottleneck=4", "train.max_epochs=3",
                               "train.batch_size=4", "eval.p=0.2"});
}

void prepare(const RunConfig& config) {
  const auto entries = ingest_manifest(config.manifest);
  const auto r = extract_features(entries, config);
  REQUIRE(r.failures.empty());
  fit_norm(entries, config);
}

}  // namespace

TEST_CASE("run config: defaults, YAML document, dotted overrides") {
  const RunConfig d = parse_run_config("");
  CHECK(d.seed == 0);
  CHECK(d.family == ModelFamily::unsupervised);
  CHECK(d.encoder_filters == std::vector<std::size_t>{32, 64, 128});
  CHECK(d.bottleneck == 128);
  CHECK(d.segment_frames == 64);
  CHECK(d.segment_hop == 32);
  CHECK(d.train.batch_size == 32);
  CHECK(d.train.max_epochs == 500);
  CHECK(d.p == doctest::Approx(0.1));
  CHECK(d.frontend().tag == FrontendTag::gammatone64);

  const std::string yaml =
      "seed: 7\n"
      "model:\n"
      "  family: semisupervised\n"
      "  alpha: 0.7\n"
      "  beta: 0.3\n"
      "train:\n"
      "  max_epochs: 12\n"
      "  lr: 0.0005\n";
  const RunConfig c = parse_run_config(yaml, {"train.max_epochs=30", "seed=9"});
  CHECK(c.seed == 9);
  CHECK(c.family == ModelFamily::semisupervised);
  CHECK(c.alpha == 0.7);
  CHECK(c.beta == 0.3);
  CHECK(c.train.max_epochs == 30);
  CHECK(c.train.lr_initial == 0.0005);
  CHECK(framework_name(c) == "SS-0.7-0.3");

  // the YAML written for a run reads back to the same configuration
  const RunConfig again = parse_run_config(c.to_yaml());
  CHECK(again.hash() == c.hash());
  CHECK(again.to_yaml() == c.to_yaml());

  const RunConfig b = parse_run_config("", {"model.family=baseline-dense"});
  CHECK(b.frontend().tag == FrontendTag::mel128);
  CHECK(framework_name(b) == "B");
}

TEST_CASE("run config: bad input is a ConfigError") {
  CHECK_THROWS_AS(parse_run_config("", {"train.max_epoch=3"}), ConfigError);
  CHECK_THROWS_AS(parse_run_config("bogus: 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("train:\n  lr: fast\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("", {"seed=-1"}), ConfigError);
  CHECK_THROWS_AS(parse_run_config("", {"no equals sign"}), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[1, 2]"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("seed: [unclosed\n"), ConfigError);
  CHECK_THROWS_AS(load_run_config(fs::path("/nonexistent/asd.yaml")), ConfigError);

  // loss weights must sum to one, and the plain autoencoder takes no beta
  // parsing validates; loss weights must sum to one, and the plain
  // autoencoder takes no beta
  CHECK_THROWS_AS(parse_run_config("", {"model.family=semisupervised", "model.alpha=0.6", "model.beta=0.3"}),
                  ConfigError);
  CHECK_THROWS_AS(parse_run_config("", {"model.alpha=0.7", "model.beta=0.3"}), ConfigError);
  CHECK_NOTHROW(parse_run_config("", {"model.family=semisupervised", "model.alpha=0.7", "model.beta=0.3"}));
  RunConfig edited = parse_run_config("");
  edited.alpha = 0.5;
  CHECK_THROWS_AS(edited.validate(), ConfigError);

  CHECK_THROWS_AS(parse_run_config("", {"frontend.filterbank=bark"}), ConfigError);
  CHECK_THROWS_AS(parse_run_config("", {"workers=0"}), ConfigError);
  CHECK_THROWS_AS(parse_run_config("", {"eval.p=0"}), ConfigError);
  CHECK_THROWS_AS(parse_run_config("", {"segment.frames=60"}), ConfigError);
  CHECK_THROWS_AS(parse_run_config("", {"model.encoder_filters=[8, 8]"}), ConfigError);
}

TEST_CASE("run config hash: results-relevant settings only") {
  const RunConfig base = parse_run_config("");
  const std::string h = base.hash();
  CHECK(parse_run_config("", {"cache_dir=/elsewhere", "run_dir=x/y", "manifest=m.csv", "workers=4"}).hash() == h);
  CHECK(parse_run_config("", {"eval.p=0.2"}).hash() == h);
  CHECK(parse_run_config("", {"frontend.filterbank=gammatone64"}).hash() == h);
  CHECK(parse_run_config("", {"frontend.window=640", "frontend.hop=320"}).hash() == h);
  CHECK(parse_run_config("", {"frontend.filterbank=mel128"}).hash() != h);
  CHECK(parse_run_config("", {"seed=1"}).hash() != h);
  CHECK(parse_run_config("", {"train.lr=0.002"}).hash() != h);
  CHECK(parse_run_config("", {"frontend.window=1024", "frontend.hop=512"}).hash() != h);
  CHECK(parse_run_config("", {"segment.hop_frames=16"}).hash() != h);
}

TEST_CASE("home directory: relative cache and run paths move under ASD_HOME") {
  ::unsetenv(kHomeVariable);
  CHECK(resolve_home_path("cache") == fs::path("cache"));
  ::setenv(kHomeVariable, "/srv/asd", 1);
  CHECK(resolve_home_path("cache") == fs::path("/srv/asd/cache"));
  CHECK(resolve_home_path("/abs/cache") == fs::path("/abs/cache"));
  CHECK(parse_run_config("", {"run_dir=runs/u"}).run_path() == fs::path("/srv/asd/runs/u"));
  ::unsetenv(kHomeVariable);
}

TEST_CASE("manifest: valid rows, relative paths, comments") {
  const std::string text =
      "path,machine_type,machine_id,split,label\n"
      "# comment\n"
      "a/normal_0.wav,fan,id_00,train,normal\n"
      "\n"
      "/abs/b.wav,fan,id_02,test,anomaly\n"
      "c.wav,pump,id_00,test,unknown\n";
  const auto entries = parse_manifest(text, "/data", false);
  REQUIRE(entries.size() == 3);
  CHECK(entries[0].path == fs::path("/data/a/normal_0.wav"));
  CHECK(entries[0].line == 3);
  CHECK(entries[0].split == Split::train);
  CHECK(entries[1].path == fs::path("/abs/b.wav"));
  CHECK(entries[1].label == Label::anomaly);
  CHECK(entries[1].machine_id == "id_02");
  CHECK(entries[2].label == Label::unknown);
  CHECK(entries[2].machine_type == "pump");
}

TEST_CASE("manifest: every bad line is reported with its line number") {
  const std::string text =
      "path,machine_type,machine_id,split,label\n"
      "a.wav,fan,id_00,train,normal\n"
      "b.wav,fan,id_00,validation,normal\n"
      "c.wav,fan,id_00,test,broken\n"
      "d.wav,fan,id_00,train,anomaly\n"
      "a.wav,fan,id_00,test,normal\n"
      "e.wav,fan,id_00\n"
      "f.wav,,id_00,test,normal\n";
  try {
    parse_manifest(text, "/data", false);
    FAIL("expected IngestError");
  } catch (const IngestError& e) {
    const auto& p = e.problems();
    REQUIRE(p.size() == 6);
    CHECK(p[0].rfind("line 3:", 0) == 0);
    CHECK(p[0].find("split") != std::string::npos);
    CHECK(p[1].rfind("line 4:", 0) == 0);
    CHECK(p[1].find("label") != std::string::npos);
    CHECK(p[2].rfind("line 5:", 0) == 0);
    CHECK(p[2].find("normal") != std::string::npos);
    CHECK(p[3].rfind("line 6:", 0) == 0);
    CHECK(p[3].find("duplicate") != std::string::npos);
    CHECK(p[4].rfind("line 7:", 0) == 0);
    CHECK(p[5].rfind("line 8:", 0) == 0);
  }

  CHECK_THROWS_AS(parse_manifest("path,machine_type,machine_id,split,label\n", "/data", false), IngestError);
  CHECK_THROWS_AS(parse_manifest("", "/data", false), IngestError);
  CHECK_THROWS_AS(parse_manifest("file,type,id,split,label\na.wav,fan,id_00,train,normal\n", "/data", false),
                  IngestError);
  try {
    parse_manifest("path,machine_type,machine_id,split,label\n", "/data", false);
  } catch (const IngestError& e) {
    CHECK(std::string(e.what()).find("no entries") != std::string::npos);
  }
  // missing files are caught when checking is on
  CHECK_THROWS_AS(parse_manifest("path,machine_type,machine_id,split,label\nnope.wav,fan,id_00,train,normal\n",
                                 "/nonexistent", true),
                  IngestError);
  CHECK_THROWS_AS(ingest_manifest("/nonexistent/manifest.csv"), IngestError);
}

TEST_CASE("DCASE manifest generation from a directory tree") {
  ScratchDir dir("dcase");
  Waveform w;
  w.samples.assign(16000, 0.0);
  const fs::path root = dir.path / "dev";
  for (const std::string type : {"fan", "ToyCar"}) {
    fs::create_directories(root / type / "train");
    fs::create_directories(root / type / "test");
    write_wav(root / type / "train" / "normal_id_00_00000000.wav", w);
    write_wav(root / type / "test" / "normal_id_02_00000000.wav", w);
    write_wav(root / type / "test" / "anomaly_id_02_00000001.wav", w);
  }
  const fs::path out = dir.path / "manifest.csv";
  CHECK(write_dcase_manifest(root, out) == 6);
  const auto entries = ingest_manifest(out);
  REQUIRE(entries.size() == 6);
  std::size_t anomalies = 0;
  for (const auto& e : entries) {
    CHECK((e.machine_type == "fan" || e.machine_type == "ToyCar"));
    if (e.label == Label::anomaly) {
      ++anomalies;
      CHECK(e.split == Split::test);
      CHECK(e.machine_id == "id_02");
    }
  }
  CHECK(anomalies == 2);
  CHECK_THROWS_AS(write_dcase_manifest(dir.path / "missing", out), IngestError);
}

TEST_CASE("feature extraction: cache hits, frontend changes, partial failures") {
  ScratchDir dir("extract");
  const fs::path manifest = tiny_corpus(dir.path, 1);
  RunConfig config = tiny_config(dir.path, manifest);
  const auto entries = ingest_manifest(manifest);
  REQUIRE(entries.size() == 24);

  const auto first = extract_features(entries, config);
  CHECK(first.computed == 24);
  CHECK(first.cached == 0);
  CHECK(first.failures.empty());
  REQUIRE(first.files.size() == 24);
  const Spectrogram s = read_feature_file(first.files[0]);
  CHECK(s.n_bins == 64);
  CHECK(s.n_frames == 24);

  const auto second = extract_features(entries, config);
  CHECK(second.computed == 0);
  CHECK(second.cached == 24);
  CHECK(second.files == first.files);

  // a different window is a different frontend and a separate cache
  RunConfig wide = parse_run_config(config.to_yaml(), {"frontend.window=1024", "frontend.hop=512"});
  const auto third = extract_features(entries, wide);
  CHECK(third.computed == 24);
  CHECK(third.files[0].parent_path() != first.files[0].parent_path());

  // four workers produce the same bytes as one
  RunConfig parallel = parse_run_config(config.to_yaml(), {"workers=4", "cache_dir=" + (dir.path / "cache4").string()});
  const auto par = extract_features(entries, parallel);
  CHECK(par.computed == 24);
  for (std::size_t i = 0; i < 24; ++i) CHECK(slurp(par.files[i]) == slurp(first.files[i]));

  // a clip that is not a WAV file is reported and the rest still extract
  const fs::path bad = manifest.parent_path() / "m0" / "test" / "anomaly_id_00_00000000.wav";
  std::ofstream(bad, std::ios::binary | std::ios::trunc) << "not a wav file";
  RunConfig fresh = parse_run_config(config.to_yaml(), {"cache_dir=" + (dir.path / "cache_bad").string()});
  const auto partial = extract_features(entries, fresh);
  REQUIRE(partial.failures.size() == 1);
  CHECK(partial.failures[0].find("anomaly_id_00_00000000.wav") != std::string::npos);
  CHECK(partial.computed == 23);
  CHECK_THROWS_AS(cached_feature_files(entries, fresh), PrerequisiteError);
}

TEST_CASE("stages refuse to run before their prerequisites") {
  ScratchDir dir("prereq");
  const fs::path manifest = tiny_corpus(dir.path, 1);
  const RunConfig config = tiny_config(dir.path, manifest);
  const auto entries = ingest_manifest(manifest);

  CHECK_THROWS_AS(fit_norm(entries, config), PrerequisiteError);
  CHECK_THROWS_AS(run_train(config), PrerequisiteError);
  extract_features(entries, config);
  CHECK_THROWS_AS(run_train(config), PrerequisiteError);  // no normalization yet
  CHECK_THROWS_AS(run_score(config), PrerequisiteError);
  CHECK_THROWS_AS(run_evaluate({dir.path / "run" / "scores.csv"}, 0.1, "U", dir.path / "run", false),
                  PrerequisiteError);

  RunConfig no_manifest = config;
  no_manifest.manifest.clear();
  CHECK_THROWS_AS(run_train(no_manifest), ConfigError);
}

TEST_CASE("normalization fit: training clips only, standardized result") {
  ScratchDir dir("norm");
  const fs::path manifest = tiny_corpus(dir.path, 2);
  const RunConfig config = tiny_config(dir.path, manifest);
  const auto entries = ingest_manifest(manifest);
  extract_features(entries, config);
  const NormStats stats = fit_norm(entries, config);
  CHECK(fs::exists(norm_path(entries, config)));
  CHECK(load_norm_stats(norm_path(entries, config)).hash() == stats.hash());

  // refit by hand from the training clips and compare
  NormAccumulator acc;
  std::vector<Spectrogram> train;
  const auto files = cached_feature_files(entries, config);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split != Split::train) continue;
    train.push_back(read_feature_file(files[i]));
    acc.add(train.back());
  }
  CHECK(train.size() == 20);
  const NormStats ref = acc.finish();
  for (std::size_t f = 0; f < 64; ++f) {
    CHECK(stats.mean[f] == doctest::Approx(ref.mean[f]).epsilon(1e-12));
    CHECK(stats.std[f] == doctest::Approx(ref.std[f]).epsilon(1e-12));
  }
  double worst_mean = 0.0, worst_std = 0.0;
  for (std::size_t f = 0; f < 64; ++f) {
    double s = 0.0, ss = 0.0, n = 0.0;
    for (const auto& spec : train) {
      const Spectrogram z = apply_norm(spec, stats);
      for (std::size_t t = 0; t < z.n_frames; ++t) {
        s += z.at(f, t);
        n += 1.0;
      }
    }
    const double mean = s / n;
    for (const auto& spec : train) {
      const Spectrogram z = apply_norm(spec, stats);
      for (std::size_t t = 0; t < z.n_frames; ++t) ss += (z.at(f, t) - mean) * (z.at(f, t) - mean);
    }
    worst_mean = std::max(worst_mean, std::abs(mean));
    worst_std = std::max(worst_std, std::abs(std::sqrt(ss / n) - 1.0));
  }
  CHECK(worst_mean < 1e-6);
  CHECK(worst_std < 1e-6);
}

TEST_CASE("end to end: train, score, evaluate, reproducibility and lineage") {
  ScratchDir dir("e2e");
  const fs::path manifest = tiny_corpus(dir.path, 2);
  const RunConfig config = tiny_config(dir.path, manifest, "run_a");
  prepare(config);

  std::ostringstream log;
  const TrainOutcome out = run_train(config, &log);
  CHECK(out.history.epochs.size() == 3);
  CHECK(out.train_clips + out.val_clips == 20);
  CHECK(out.val_clips == 2);  // 10% of each machine type
  CHECK(log.str().find("epoch    1/3") != std::string::npos);
  for (const char* name : {"config.yaml", "norm.json", "best.ckpt", "final.ckpt", "history.csv"}) {
    CHECK_MESSAGE(fs::exists(out.run_dir / name), name);
  }
  CHECK(parse_run_config(slurp(out.run_dir / "config.yaml")).hash() == config.hash());

  const auto records = run_score(config);
  REQUIRE(records.size() == 28);
  for (const auto& r : records) CHECK(std::isfinite(r.anomaly_score));
  std::string lineage;
  const auto reread = read_scores_csv(out.run_dir / "scores.csv", &lineage);
  CHECK(lineage == config.hash());
  REQUIRE(reread.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) CHECK(reread[i].anomaly_score == records[i].anomaly_score);

  const auto eval = run_evaluate({out.run_dir / "scores.csv"}, config.p, "U", out.run_dir, false);
  CHECK(eval.complete);
  CHECK(eval.result.machines.size() == 2);
  CHECK(fs::exists(out.run_dir / "results_auc.csv"));
  CHECK(fs::exists(out.run_dir / "results_pauc.csv"));
  std::vector<ResultRow> rows;
  const std::string table = run_report({out.run_dir / "results_auc.csv"}, Metric::auc, true, &rows);
  REQUIRE(rows.size() == 1 + reported_rows(Metric::auc).size());
  CHECK(rows[0].framework == "U");
  CHECK(table.find("m0") != std::string::npos);
  CHECK(table.find("published") != std::string::npos);

  SUBCASE("a second run with the same settings writes identical files") {
    RunConfig again = config;
    again.run_dir = (dir.path / "run_b").string();
    again.workers = 3;
    run_train(again);
    run_score(again);
    CHECK(slurp(dir.path / "run_b" / "scores.csv") == slurp(out.run_dir / "scores.csv"));
    CHECK(slurp(dir.path / "run_b" / "history.csv") == slurp(out.run_dir / "history.csv"));
    CHECK(slurp(dir.path / "run_b" / "best.ckpt") == slurp(out.run_dir / "best.ckpt"));
  }

  SUBCASE("score files from different runs are not mixed silently") {
    RunConfig other = config;
    other.run_dir = (dir.path / "run_c").string();
    other.seed = 1;
    run_train(other);
    run_score(other);
    const std::vector<fs::path> both{out.run_dir / "scores.csv", dir.path / "run_c" / "scores.csv"};
    CHECK_THROWS_AS(run_evaluate(both, 0.2, "U", dir.path / "mixed", false), LineageError);
    CHECK_NOTHROW(run_evaluate(both, 0.2, "U", dir.path / "mixed", true));
  }

  SUBCASE("a checkpoint trained on another frontend is refused") {
    RunConfig wide = config;
    wide.window = 1024;
    wide.hop = 512;
    CHECK_THROWS_AS(run_score(wide), LineageError);
  }

  SUBCASE("a modified checkpoint is refused") {
    std::string bytes = slurp(out.run_dir / "best.ckpt");
    bytes[bytes.size() - 5] ^= 0x01;
    std::ofstream(out.run_dir / "best.ckpt", std::ios::binary | std::ios::trunc) << bytes;
    CHECK_THROWS_AS(run_score(config), FormatError);
  }

  SUBCASE("a replaced norm.json is refused") {
    NormStats stats = load_norm_stats(out.run_dir / "norm.json");
    stats.mean[0] += 1.0;
    save_norm_stats(out.run_dir / "norm.json", stats);
    CHECK_THROWS_AS(run_score(config), LineageError);
  }
}

TEST_CASE("end to end: semi-supervised and dense baseline families") {
  ScratchDir dir("families");
  const fs::path manifest = tiny_corpus(dir.path, 2);

  RunConfig ss = tiny_config(dir.path, manifest, "run_ss");
  ss.family = ModelFamily::semisupervised;
  ss.alpha = 0.7;
  ss.beta = 0.3;
  prepare(ss);
  run_train(ss);
  const auto model = load_checkpoint_as<float>(dir.path / "run_ss" / "best.ckpt");
  CHECK(model.config.ae.class_names == std::vector<std::string>{"m0", "m1"});
  CHECK(run_score(ss).size() == 28);

  // the baseline reads 128-bin Mel features, a separate cache entry
  RunConfig b = tiny_config(dir.path, manifest, "run_b");
  b.family = ModelFamily::baseline_dense;
  prepare(b);
  run_train(b);
  const auto scores = run_score(b);
  CHECK(scores.size() == 28);
  const auto eval = run_evaluate({dir.path / "run_b" / "scores.csv"}, b.p, framework_name(b), dir.path / "run_b",
                                 false);
  CHECK(eval.result.machines.size() == 2);
}

TEST_CASE("selftest passes") {
  for (const auto& r : run_selftest(3)) CHECK_MESSAGE(r.passed, r.name << ": " << r.detail);
  CHECK_THROWS_AS(run_selftest(0), ConfigError);
}

#ifdef ASD_TOOL_PATH
namespace {

int run_tool(const std::string& args) {
  const std::string cmd = std::string(ASD_TOOL_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("command line: exit status per failing stage") {
  ScratchDir dir("cli");
  const fs::path manifest = tiny_corpus(dir.path, 1);
  const std::string base = "--manifest " + manifest.string() + " --cache " + (dir.path / "cache").string() +
                           " --run-dir " + (dir.path / "run").string() +
                           " --set segment.frames=16 --set segment.hop_frames=8"
                           " --set 'model.encoder_filters=[2,2,2]' --set model.bottleneck=4 --epochs 2"
                           " --set train.batch_size=4 --p 0.2";

  CHECK(run_tool("--help") == 0);
  CHECK(run_tool("--set nonsense.key=1 --print-config") == 2);
  CHECK(run_tool("--no-such-flag") == 2);
  CHECK(run_tool("--alpha 0.5 --beta 0.4 --model semisupervised " + base + " train") == 2);
  CHECK(run_tool("--manifest /nonexistent.csv ingest") == 3);
  CHECK(run_tool(base + " train") == 5);  // no features yet
  CHECK(run_tool(base + " score") == 6);
  CHECK(run_tool(base + " evaluate") == 7);

  CHECK(run_tool(base + " ingest") == 0);
  CHECK(run_tool(base + " extract-features") == 0);
  CHECK(run_tool(base + " fit-norm") == 0);
  CHECK(run_tool(base + " train") == 0);
  CHECK(run_tool(base + " score") == 0);
  CHECK(run_tool(base + " evaluate") == 0);
  CHECK(run_tool("report " + (dir.path / "run").string()) == 0);
  CHECK(run_tool("report " + (dir.path / "missing").string()) == 7);

  // one unreadable clip makes extraction a partial failure
  std::ofstream(manifest.parent_path() / "m0" / "test" / "normal_id_00_00000000.wav", std::ios::trunc) << "x";
  CHECK(run_tool("--manifest " + manifest.string() + " --cache " + (dir.path / "cache2").string() +
                 " extract-features") == 4);
}
#endif
