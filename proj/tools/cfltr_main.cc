#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cfltr/clicksim.h"
#include "cfltr/corpus.h"
#include "cfltr/cpbm.h"
#include "cfltr/errors.h"
#include "cfltr/eval.h"
#include "cfltr/experiment.h"
#include "cfltr/hte.h"
#include "cfltr/ltr.h"
#include "cfltr/random.h"
#include "json.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string DefaultOutputDir() {
  const char* env = std::getenv(cfltr::kOutputDirEnv);
  return env && *env ? env : "cfltr_out";
}

std::ofstream OpenOut(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw cfltr::Error("cannot write " + path.string());
  return out;
}

std::ifstream OpenIn(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw cfltr::Error("cannot open " + path);
  return in;
}

json ReadJson(const std::string& path) {
  auto in = OpenIn(path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw cfltr::ParseError(0, path + ": " + e.what());
  }
}

// Flags shared by every subcommand that needs an experiment configuration.
struct ConfigFlags {
  std::string config_path;
  std::string letor_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> runs;
  std::vector<double> avg_searches;
  std::vector<double> pct_queries;
  std::vector<std::string> methods;
  std::optional<int> workers;
  bool full_grid = false;
  bool record_wallclock = false;

  void Register(CLI::App* app) {
    app->add_option("--config", config_path, "JSON config file; flags override its values");
    app->add_option("--letor", letor_path, "LETOR corpus file (default: synthetic corpus)");
    app->add_option("--seed", seed, "Base seed (default 42)");
    app->add_option("--runs", runs, "Independent runs per condition (default 3)");
    app->add_option("--avg-searches", avg_searches,
                    "Average searches per query grid (default 5 25)")
        ->delimiter(',');
    app->add_option("--pct-queries", pct_queries,
                    "Fractions of training queries with interventions (default 0.1 1.0)")
        ->delimiter(',');
    app->add_option("--methods", methods,
                    "Subset of cpbm_ltr cpbm_clipped_ips_ltr causal_forest_ltr x_learner_ltr")
        ->delimiter(',');
    app->add_option("--workers", workers, "Concurrent grid cells (default 1)");
    app->add_flag("--full-grid", full_grid, "Use the full 4x4x3 grid");
    app->add_flag("--record-wallclock", record_wallclock,
                  "Write measured seconds instead of 0 into wallclock_s");
  }

  cfltr::ExperimentConfig Resolve() const {
    cfltr::ExperimentConfig c;
    if (full_grid) c = cfltr::ExperimentConfig::FullGrid();
    if (!config_path.empty()) {
      json j = cfltr::ExperimentConfig::FullGrid().ToJson();
      if (!full_grid) j = cfltr::ExperimentConfig().ToJson();
      j.merge_patch(ReadJson(config_path));
      c = cfltr::ExperimentConfig::FromJson(j);
    }
    if (!letor_path.empty()) c.letor_path = letor_path;
    if (seed) c.base_seed = *seed;
    if (runs) c.n_runs = *runs;
    if (!avg_searches.empty()) c.avg_searches_per_query = avg_searches;
    if (!pct_queries.empty()) c.pct_training_queries = pct_queries;
    if (!methods.empty()) c.methods = methods;
    if (workers) c.n_workers = *workers;
    if (record_wallclock) c.record_wallclock = true;
    c.Validate();
    return c;
  }
};

int RunCommand(const ConfigFlags& flags, const std::string& output_dir) {
  const auto config = flags.Resolve();
  const auto result = cfltr::RunExperiment(config, output_dir);
  std::size_t failed = 0;
  for (const auto& r : result.rows) failed += !r.error.empty();
  std::cout << "wrote " << result.rows.size() << " result rows (" << failed << " failed) and "
            << result.pvalues.size() << " p-value rows to " << output_dir << "\n";
  return 0;
}

int SimulateCommand(const ConfigFlags& flags, const std::string& output_dir, int run,
                    bool control_only) {
  const auto config = flags.Resolve();
  const double avg = config.avg_searches_per_query.front();
  const double pct = config.pct_training_queries.front();
  const auto setup = cfltr::PrepareRun(config, run);
  if (!setup.warning.empty()) std::cerr << "warning: " << setup.warning << "\n";
  const fs::path dir(output_dir);
  const std::uint64_t seed = cfltr::DeriveSeed(config.base_seed, "simulate", run);
  const auto groups = control_only
                          ? setup.corpus.train
                          : cfltr::SubsampleQueries(setup.corpus.train, pct,
                                                    cfltr::DeriveSeed(seed, "query-subsample"));
  const auto log = cfltr::RunSimulation(groups, setup.production_ranker,
                                        setup.corpus.context_feature_indices,
                                        setup.click_model, {avg, !control_only}, seed);
  {
    auto csv = OpenOut(dir / "impressions.csv");
    auto ctx = OpenOut(dir / "contexts.csv");
    cfltr::WriteImpressions(csv, ctx, log);
  }
  {
    auto out = OpenOut(dir / "corpus.cache");
    cfltr::SaveCorpusCache(out, setup.corpus);
  }
  {
    auto out = OpenOut(dir / "click_model.json");
    out << cfltr::ClickModelToJson(setup.click_model).dump(2) << "\n";
  }
  {
    auto out = OpenOut(dir / "production_ranker.txt");
    setup.production_ranker.Save(out);
  }
  std::cout << "simulated " << log.size() << " impressions over " << groups.size()
            << " queries into " << output_dir << "\n";
  return 0;
}

int EstimateCommand(const ConfigFlags& flags, const std::string& impressions,
                    const std::string& contexts, const std::string& method,
                    const std::string& output) {
  const auto config = flags.Resolve();
  auto csv = OpenIn(impressions);
  auto ctx = OpenIn(contexts);
  const auto log = cfltr::ReadImpressions(csv, ctx);
  const std::uint64_t seed = cfltr::DeriveSeed(config.base_seed, "estimate/" + method);
  json model;
  if (method == "cpbm") {
    cfltr::CpbmHyper hyper = config.cpbm;
    hyper.k_max = config.k_max;
    hyper.seed = seed;
    model = cfltr::CpbmModel::Fit(cfltr::BuildCpbmDataset(log, config.k_max), hyper).ToJson();
  } else {
    const auto hte_method = cfltr::ParseHteMethod(method);
    const cfltr::HteConfig hte{config.causal_forest, config.x_learner_base};
    const auto bank = cfltr::FitBank(log, hte_method, hte, seed, config.k_max,
                                     std::max(1, config.n_workers));
    for (int k = 2; k <= config.k_max; ++k) {
      if (bank.failed(k)) {
        std::cerr << "warning: position " << k << " fell back to a constant: "
                  << bank.entry(k).failure << "\n";
      }
    }
    model = bank.ToJson();
  }
  auto out = OpenOut(output);
  out << model.dump() << "\n";
  std::cout << "wrote " << method << " estimator to " << output << "\n";
  return 0;
}

int EvalCommand(const std::string& corpus_cache, const std::string& click_model_path,
                const std::string& estimator_path, const std::string& ranker_path) {
  auto cache = OpenIn(corpus_cache);
  const auto corpus = cfltr::LoadCorpusCache(cache);
  json report;
  if (!estimator_path.empty()) {
    if (click_model_path.empty()) throw cfltr::ValidationError("--click-model is required");
    const auto params = cfltr::ClickModelFromJson(ReadJson(click_model_path));
    const cfltr::TrueTauOracle oracle(corpus.test, corpus.context_feature_indices, params);
    const json j = ReadJson(estimator_path);
    cfltr::TauRmseReport rmse;
    if (j.value("format", "") == "cfltr-cpbm") {
      const auto model = cfltr::CpbmModel::FromJson(j);
      rmse = cfltr::TauRmse(
          [&](std::span<const double> x, int k) { return model.Tau(x, k); }, oracle,
          corpus.test);
    } else {
      const auto bank = cfltr::TauEstimatorBank::FromJson(j);
      rmse = cfltr::TauRmse(
          [&](std::span<const double> x, int k) { return bank.Predict(x, k); }, oracle,
          corpus.test);
    }
    report["rmse"] = rmse.rmse;
    report["rmse_r0"] = rmse.rmse_r0;
    report["rmse_r1"] = rmse.rmse_r1;
  }
  if (!ranker_path.empty()) {
    auto in = OpenIn(ranker_path);
    report["ndcg10"] = cfltr::NdcgAt10(cfltr::LinearRankModel::Load(in), corpus.test);
  }
  if (report.empty()) throw cfltr::ValidationError("give --estimator and/or --ranker");
  std::cout << report.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual learning-to-rank experiments with position-bias estimation"};
  app.require_subcommand(1);
  std::string output_dir = DefaultOutputDir();

  ConfigFlags run_flags;
  auto* run = app.add_subcommand("run", "Run the full experiment grid");
  run_flags.Register(run);
  run->add_option("--output-dir", output_dir,
                  std::string("Output directory (default $") + cfltr::kOutputDirEnv +
                      " or cfltr_out)");

  ConfigFlags sim_flags;
  int sim_run = 0;
  bool control_only = false;
  auto* simulate = app.add_subcommand(
      "simulate", "Simulate clicks for the first grid condition and export impressions");
  sim_flags.Register(simulate);
  simulate->add_option("--output-dir", output_dir, "Output directory");
  simulate->add_option("--run", sim_run, "Run index selecting corpus and click model");
  simulate->add_flag("--control-only", control_only,
                     "Log observational traffic on all training queries instead");

  ConfigFlags est_flags;
  std::string impressions, contexts, method = "causal_forest", est_output;
  auto* estimate = app.add_subcommand("estimate", "Fit a position-bias estimator");
  est_flags.Register(estimate);
  estimate->add_option("--impressions", impressions, "Impression CSV")->required();
  estimate->add_option("--contexts", contexts, "Context sidecar CSV")->required();
  estimate->add_option("--method", method, "cpbm, causal_forest or x_learner")
      ->check(CLI::IsMember({"cpbm", "causal_forest", "x_learner"}));
  estimate->add_option("--output", est_output, "Model JSON path")->required();

  std::string corpus_cache, click_model, estimator, ranker;
  auto* eval = app.add_subcommand("eval", "Evaluate saved models on the test split");
  eval->add_option("--corpus-cache", corpus_cache, "Corpus cache written by simulate")
      ->required();
  eval->add_option("--click-model", click_model, "Click model JSON written by simulate");
  eval->add_option("--estimator", estimator, "Estimator JSON written by estimate");
  eval->add_option("--ranker", ranker, "Linear ranking model");

  std::string results_dir, kind, plot_dir;
  auto* plot = app.add_subcommand("plot-data", "Emit plot-ready CSV from a results directory");
  plot->add_option("--results-dir", results_dir, "Directory written by run")->required();
  plot->add_option("--kind", kind, "rmse_by_condition, ndcg_box or ctr_distributions")
      ->required();
  plot->add_option("--output-dir", plot_dir, "Output directory (default: results dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help and --version exit 0; every other parse failure is a usage error.
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*run) return RunCommand(run_flags, output_dir);
    if (*simulate) return SimulateCommand(sim_flags, output_dir, sim_run, control_only);
    if (*estimate) return EstimateCommand(est_flags, impressions, contexts, method, est_output);
    if (*eval) return EvalCommand(corpus_cache, click_model, estimator, ranker);
    if (*plot) {
      try {
        std::cout << cfltr::EmitPlotData(results_dir, kind,
                                         plot_dir.empty() ? results_dir : plot_dir)
                  << "\n";
      } catch (const cfltr::ValidationError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
      }
      return 0;
    }
  } catch (const cfltr::ValidationError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 2;
  } catch (const cfltr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
