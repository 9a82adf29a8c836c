#ifndef CFLTR_EXPERIMENT_H_
#define CFLTR_EXPERIMENT_H_

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cfltr/clicksim.h"
#include "cfltr/corpus.h"
#include "cfltr/cpbm.h"
#include "cfltr/debias.h"
#include "cfltr/eval.h"
#include "cfltr/forest.h"
#include "cfltr/hte.h"
#include "cfltr/ltr.h"
#include "json.hpp"

namespace cfltr {

inline constexpr const char* kCpbmLtr = "cpbm_ltr";
inline constexpr const char* kCpbmClippedIpsLtr = "cpbm_clipped_ips_ltr";
inline constexpr const char* kCausalForestLtr = "causal_forest_ltr";
inline constexpr const char* kXLearnerLtr = "x_learner_ltr";

// Name of the environment variable holding the default output directory.
inline constexpr const char* kOutputDirEnv = "CFLTR_OUTPUT_DIR";

struct SyntheticSpec {
  int n_queries = 1000;
  int docs_per_query = 20;
  int feature_dim = 30;
  double label_noise = 0.5;
  int n_informative = 8;
};

struct ExperimentConfig {
  std::string letor_path;  // Empty selects the synthetic corpus.
  SyntheticSpec synthetic;
  int n_context_features = 10;
  std::vector<double> avg_searches_per_query{5.0, 25.0};
  std::vector<double> pct_training_queries{0.1, 1.0};
  std::vector<std::string> methods{kCpbmLtr, kCpbmClippedIpsLtr, kCausalForestLtr,
                                   kXLearnerLtr};
  int n_runs = 3;
  std::uint64_t base_seed = 42;
  int k_max = 10;
  double noise_click_prob = 0.1;
  double production_fraction = 0.01;
  PairwiseOptions ltr;
  CpbmHyper cpbm;
  ForestConfig causal_forest;
  ForestConfig x_learner_base = ForestConfig::RegressionDefaults();
  ForestConfig feature_importance = ForestConfig::ImportanceDefaults();
  PropensityClip ips_clip;
  int n_workers = 1;
  // Off by default so that repeated runs write identical bytes.
  bool record_wallclock = false;
  bool dump_ctr = true;

  void Validate() const;
  nlohmann::json ToJson() const;
  // Keys absent from `j` keep their defaults; unknown keys are rejected.
  static ExperimentConfig FromJson(const nlohmann::json& j);
  static ExperimentConfig FromFile(const std::string& path);
  // The full 4 x 4 x 3 grid: {5,10,25,50} x {0.01,0.1,0.5,1} x 3 runs.
  static ExperimentConfig FullGrid();
};

// State shared by every condition of one run: corpus, context features,
// production ranker and click model, all derived from (base_seed, run).
struct RunSetup {
  int run = 0;
  CorpusSplit corpus;
  LinearRankModel production_ranker;
  ClickModelParams click_model;
  std::string warning;
};

RunSetup PrepareRun(const ExperimentConfig& config, int run,
                    const std::vector<QueryGroup>* letor_groups = nullptr);

nlohmann::json ClickModelToJson(const ClickModelParams& params);
ClickModelParams ClickModelFromJson(const nlohmann::json& j);

// One row of the click-rate dump behind the click-distribution plots.
struct CtrDumpRow {
  std::string method;
  std::string query_id;
  int doc_index = 0;
  int position = 1;
  int binary_rel = 0;
  int n_obs = 0;
  double ctr_obs = 0.0;
  double tau_hat = 0.0;
  double theta = 0.0;
  int resampled_clicks = 0;
  double true_ctr = 0.0;  // Closed-form P(C | x, position 1).
  double ips_ctr = 0.0;   // Sum of IPS weights of the pair's clicks / n_obs.
};

// `ips` may be empty, which leaves ips_ctr at NaN.
std::vector<CtrDumpRow> BuildCtrDump(const std::string& method,
                                     const std::vector<CorrectedExample>& examples,
                                     const TrueTauOracle& oracle,
                                     const std::vector<IpsWeightedClick>& ips);
void WriteCtrDump(std::ostream& out, const std::vector<CtrDumpRow>& rows);

struct PValueRow {
  std::string method;
  double avg_searches = 0.0;
  double pct_queries = 0.0;
  double p_vs_cpbm_ltr = 0.0;  // NaN when fewer than two runs succeeded.
};

struct ExperimentResult {
  std::vector<MetricReport> rows;  // (condition, run, method) order.
  std::vector<PValueRow> pvalues;
};

// Runs the full grid. When `output_dir` is non-empty writes results.csv,
// pvalues.csv, errors.csv, config.json and (if enabled) ctr/ dumps.
ExperimentResult RunExperiment(const ExperimentConfig& config, const std::string& output_dir);

// Results CSV: `method,avg_searches,pct_queries,run,rmse,rmse_r0,rmse_r1,ndcg10,wallclock_s`.
void WriteResults(std::ostream& out, const std::vector<MetricReport>& rows);
std::vector<MetricReport> ReadResults(std::istream& in);
void WritePValues(std::ostream& out, const std::vector<PValueRow>& rows);

// Welch p-values of every method against cpbm_ltr per condition.
std::vector<PValueRow> ComputePValues(const ExperimentConfig& config,
                                      const std::vector<MetricReport>& rows);

// Shortest decimal form that round-trips.
std::string FormatNumber(double value);

// Writes `<kind>.csv` into `out_dir` from a results directory produced by
// RunExperiment; kinds are rmse_by_condition, ndcg_box and ctr_distributions.
// Throws ValidationError for an unknown kind. Returns the written path.
std::string EmitPlotData(const std::string& results_dir, const std::string& kind,
                         const std::string& out_dir);

}  // namespace cfltr

#endif  // CFLTR_EXPERIMENT_H_
