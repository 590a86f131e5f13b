// Command-line front end for the anomalous-sound-detection pipeline.

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "asd/errors.hpp"
#include "asd/pipeline.hpp"
#include "asd/synth.hpp"

namespace fs = std::filesystem;
using asd::ExitCode;

namespace {

struct Options {
  std::string config_file;
  std::vector<std::string> sets;
  bool print_config = false;

  std::string manifest, cache, run_dir, model;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers, epochs;
  std::optional<double> alpha, beta, p;
};

asd::RunConfig resolve(const Options& o) {
  std::vector<std::string> overrides;
  if (!o.manifest.empty()) overrides.push_back("manifest=" + o.manifest);
  if (!o.cache.empty()) overrides.push_back("cache_dir=" + o.cache);
  if (!o.run_dir.empty()) overrides.push_back("run_dir=" + o.run_dir);
  if (!o.model.empty()) overrides.push_back("model.family=" + o.model);
  if (o.seed) overrides.push_back("seed=" + std::to_string(*o.seed));
  if (o.workers) overrides.push_back("workers=" + std::to_string(*o.workers));
  if (o.epochs) overrides.push_back("train.max_epochs=" + std::to_string(*o.epochs));
  if (o.alpha) overrides.push_back("model.alpha=" + std::to_string(*o.alpha));
  if (o.beta) overrides.push_back("model.beta=" + std::to_string(*o.beta));
  if (o.p) overrides.push_back("eval.p=" + std::to_string(*o.p));
  overrides.insert(overrides.end(), o.sets.begin(), o.sets.end());
  std::optional<fs::path> file;
  if (!o.config_file.empty()) file = o.config_file;
  return asd::load_run_config(file, overrides);
}

void print_manifest_summary(const std::vector<asd::ManifestEntry>& entries) {
  std::map<std::string, std::map<std::string, std::size_t>> counts;
  for (const auto& e : entries) {
    const std::string key = std::string(asd::to_string(e.split)) + "/" + std::string(asd::to_string(e.label));
    ++counts[e.machine_type][key];
  }
  std::cout << entries.size() << " clips\n";
  for (const auto& [type, by_key] : counts) {
    std::cout << "  " << type << ":";
    for (const auto& [key, n] : by_key) std::cout << ' ' << key << '=' << n;
    std::cout << '\n';
  }
}

// Maps an exception from a stage to the tool's exit status.
int fail(const std::exception& e, ExitCode stage) {
  std::cerr << "error: " << e.what() << '\n';
  if (dynamic_cast<const asd::ConfigError*>(&e)) return static_cast<int>(ExitCode::config);
  if (dynamic_cast<const asd::IngestError*>(&e)) return static_cast<int>(ExitCode::ingest);
  return static_cast<int>(stage);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Anomalous sound detection with convolutional autoencoders on log-gammatone features"};
  app.require_subcommand(0, 1);
  app.fallthrough();

  Options o;
  app.add_option("-c,--config", o.config_file, "YAML run config");
  app.add_option("--set", o.sets, "Override a config key, e.g. --set train.max_epochs=30 (repeatable)");
  app.add_flag("--print-config", o.print_config, "Print the resolved config and exit");
  app.add_option("--manifest", o.manifest, "Manifest CSV (config key manifest)");
  app.add_option("--cache", o.cache, "Feature cache directory (cache_dir)");
  app.add_option("--run-dir", o.run_dir, "Run output directory (run_dir)");
  app.add_option("--model", o.model, "unsupervised | semisupervised | baseline-dense (model.family)");
  app.add_option("--seed", o.seed, "Random seed (seed)");
  app.add_option("--workers", o.workers, "Worker threads for extraction and scoring (workers)");
  app.add_option("--epochs", o.epochs, "Maximum epochs (train.max_epochs)");
  app.add_option("--alpha", o.alpha, "Reconstruction loss weight (model.alpha)");
  app.add_option("--beta", o.beta, "Classification loss weight (model.beta)");
  app.add_option("--p", o.p, "Maximum false-positive rate for pAUC (eval.p)");

  auto* ingest = app.add_subcommand("ingest", "Validate a manifest and summarize it");
  auto* extract = app.add_subcommand("extract-features", "Compute and cache features for every clip");
  auto* fitnorm = app.add_subcommand("fit-norm", "Fit per-bin normalization on the train split");
  auto* train = app.add_subcommand("train", "Train the configured model");
  auto* score = app.add_subcommand("score", "Score the test split with the best checkpoint");

  auto* evaluate = app.add_subcommand("evaluate", "AUC and pAUC per machine type from score files");
  std::vector<std::string> score_files;
  std::string eval_out, eval_name;
  bool force = false;
  evaluate->add_option("--scores", score_files, "Score CSVs (default: <run_dir>/scores.csv)");
  evaluate->add_option("--out", eval_out, "Directory for results_auc.csv / results_pauc.csv (default: run_dir)");
  evaluate->add_option("--name", eval_name, "Row name in the result tables (default from the model family)");
  evaluate->add_flag("--force", force, "Combine score files from different runs");

  auto* report = app.add_subcommand("report", "Combine results from several runs into comparison tables");
  std::vector<std::string> report_inputs;
  std::string report_metric = "both";
  bool no_reported = false;
  report->add_option("inputs", report_inputs, "Run directories or results CSVs")->required();
  report->add_option("--metric", report_metric, "auc | pauc | both")->check(CLI::IsMember({"auc", "pauc", "both"}));
  report->add_flag("--no-reported", no_reported, "Omit the published reference rows");

  auto* gen = app.add_subcommand("gen-manifest-dcase", "Write a manifest for a <root>/<type>/{train,test} tree");
  std::string dcase_root, dcase_out = "manifest.csv";
  gen->add_option("root", dcase_root, "Dataset root")->required();
  gen->add_option("-o,--out", dcase_out, "Manifest to write");

  auto* synth = app.add_subcommand("gen-synthetic", "Write a toy corpus (tones, anomalies with noise bursts)");
  std::string synth_dir;
  std::size_t synth_types = 1;
  std::uint64_t synth_seed = 0;
  synth->add_option("dir", synth_dir, "Output directory")->required();
  synth->add_option("--types", synth_types, "Number of machine types")->check(CLI::Range(1, 6));
  synth->add_option("--corpus-seed", synth_seed, "Seed for the generated audio");

  auto* selftest = app.add_subcommand("selftest", "Gradient checks and metric oracles");
  std::size_t selftest_seeds = 3;
  selftest->add_option("--seeds", selftest_seeds, "Random draws per gradient check")->check(CLI::Range(1, 1000));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::config);
  }

  asd::RunConfig config;
  try {
    config = resolve(o);
  } catch (const std::exception& e) {
    return fail(e, ExitCode::config);
  }
  if (o.print_config) {
    std::cout << config.to_yaml() << "# run hash: " << config.hash() << '\n';
    return 0;
  }

  if (*ingest) {
    try {
      if (config.manifest.empty()) throw asd::ConfigError("no manifest given (--manifest)");
      print_manifest_summary(asd::ingest_manifest(config.manifest));
      return 0;
    } catch (const std::exception& e) {
      return fail(e, ExitCode::ingest);
    }
  }
  if (*extract) {
    try {
      if (config.manifest.empty()) throw asd::ConfigError("no manifest given (--manifest)");
      const auto entries = asd::ingest_manifest(config.manifest);
      const auto r = asd::extract_features(entries, config, &std::cout);
      return r.failures.empty() ? 0 : static_cast<int>(ExitCode::features);
    } catch (const std::exception& e) {
      return fail(e, ExitCode::features);
    }
  }
  if (*fitnorm) {
    try {
      if (config.manifest.empty()) throw asd::ConfigError("no manifest given (--manifest)");
      asd::fit_norm(asd::ingest_manifest(config.manifest), config, &std::cout);
      return 0;
    } catch (const std::exception& e) {
      return fail(e, ExitCode::features);
    }
  }
  if (*train) {
    try {
      std::cout << "model " << asd::to_string(config.family) << ", loss weights alpha=" << config.alpha
                << " beta=" << config.beta << ", run hash " << config.hash() << '\n';
      asd::run_train(config, &std::cout);
      return 0;
    } catch (const std::exception& e) {
      return fail(e, ExitCode::train);
    }
  }
  if (*score) {
    try {
      asd::run_score(config, &std::cout);
      return 0;
    } catch (const std::exception& e) {
      return fail(e, ExitCode::score);
    }
  }
  if (*evaluate) {
    try {
      std::vector<fs::path> files(score_files.begin(), score_files.end());
      if (files.empty()) files.push_back(config.run_path() / "scores.csv");
      const fs::path out = eval_out.empty() ? config.run_path() : fs::path(eval_out);
      const std::string name = eval_name.empty() ? asd::framework_name(config) : eval_name;
      const auto r = asd::run_evaluate(files, config.p, name, out, force, &std::cout);
      if (!r.complete) {
        for (const auto& [type, m] : r.result.machines) {
          if (m.auc && !m.pauc) std::cerr << "error: " << type << ": " << m.problem << '\n';
        }
        return static_cast<int>(ExitCode::evaluate);
      }
      return 0;
    } catch (const std::exception& e) {
      return fail(e, ExitCode::evaluate);
    }
  }
  if (*report) {
    try {
      for (const auto metric : {asd::Metric::auc, asd::Metric::pauc}) {
        const bool is_auc = metric == asd::Metric::auc;
        if (report_metric != "both" && (report_metric == "auc") != is_auc) continue;
        std::vector<fs::path> files;
        for (const auto& in : report_inputs) {
          fs::path p(in);
          if (fs::is_directory(p)) p /= is_auc ? "results_auc.csv" : "results_pauc.csv";
          files.push_back(p);
        }
        std::cout << asd::run_report(files, metric, !no_reported) << '\n';
      }
      return 0;
    } catch (const std::exception& e) {
      return fail(e, ExitCode::evaluate);
    }
  }
  if (*gen) {
    try {
      const auto n = asd::write_dcase_manifest(dcase_root, dcase_out);
      std::cout << "wrote " << n << " entries to " << dcase_out << '\n';
      return 0;
    } catch (const std::exception& e) {
      return fail(e, ExitCode::ingest);
    }
  }
  if (*synth) {
    try {
      asd::SynthCorpusSpec spec;
      spec.seed = synth_seed;
      spec.machines.clear();
      for (std::size_t i = 0; i < synth_types; ++i) {
        spec.machines.push_back({"machine" + std::to_string(i), 180.0 + 70.0 * static_cast<double>(i)});
      }
      std::cout << "wrote " << asd::write_synthetic_corpus(synth_dir, spec).string() << '\n';
      return 0;
    } catch (const std::exception& e) {
      return fail(e, ExitCode::ingest);
    }
  }
  if (*selftest) {
    bool all = true;
    for (const auto& r : asd::run_selftest(selftest_seeds)) {
      std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
      all = all && r.passed;
    }
    return all ? 0 : static_cast<int>(ExitCode::failure);
  }
  std::cout << app.help();
  return 0;
}
