#include "cfltr/experiment.h"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "cfltr/errors.h"
#include "cfltr/parallel.h"
#include "cfltr/random.h"

namespace cfltr {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void CheckKeys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ValidationError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void Read(const json& j, const char* key, T& target) {
  if (j.contains(key)) target = j.at(key).get<T>();
}

json ForestToJson(const ForestConfig& c) {
  return {{"n_trees", c.n_trees},
          {"max_depth", c.max_depth},
          {"min_leaf", c.min_leaf},
          {"min_leaf_per_arm", c.min_leaf_per_arm},
          {"subsample_fraction", c.subsample_fraction},
          {"n_candidate_features", c.n_candidate_features},
          {"honest", c.honest},
          {"max_thresholds", c.max_thresholds},
          {"n_threads", c.n_threads}};
}

ForestConfig ForestFromJson(const json& j, ForestConfig c, const std::string& where) {
  CheckKeys(j,
            {"n_trees", "max_depth", "min_leaf", "min_leaf_per_arm", "subsample_fraction",
             "n_candidate_features", "honest", "max_thresholds", "n_threads"},
            where);
  Read(j, "n_trees", c.n_trees);
  Read(j, "max_depth", c.max_depth);
  Read(j, "min_leaf", c.min_leaf);
  Read(j, "min_leaf_per_arm", c.min_leaf_per_arm);
  Read(j, "subsample_fraction", c.subsample_fraction);
  Read(j, "n_candidate_features", c.n_candidate_features);
  Read(j, "honest", c.honest);
  Read(j, "max_thresholds", c.max_thresholds);
  Read(j, "n_threads", c.n_threads);
  return c;
}

bool IsKnownMethod(const std::string& m) {
  return m == kCpbmLtr || m == kCpbmClippedIpsLtr || m == kCausalForestLtr ||
         m == kXLearnerLtr;
}

std::string PairKey(const std::string& query_id, int doc_index) {
  std::string key = query_id;
  key.push_back('\x1f');
  key += std::to_string(doc_index);
  return key;
}

std::string CellTag(double avg, double pct, int run) {
  return "a" + FormatNumber(avg) + "_p" + FormatNumber(pct) + "_r" + std::to_string(run);
}

std::vector<std::string> SplitCsvLine(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double ParseDouble(const std::string& s) {
  if (s == "nan" || s == "-nan") return kNaN;
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ParseError(0, "not a number: '" + s + "'");
  }
  return v;
}

struct CellOutput {
  std::vector<MetricReport> rows;
  std::vector<CtrDumpRow> ctr_dump;
};

LinearRankModel TrainOnLists(const std::vector<TrainingList>& lists,
                             const std::vector<QueryGroup>& corpus, int feature_dim,
                             PairwiseOptions options, std::uint64_t seed) {
  const auto pairs = ExpandPairs(lists, corpus);
  if (pairs.empty()) throw TrainingError(0, "training lists yield no preference pairs");
  options.seed = seed;
  return TrainPairwise(pairs, feature_dim, options);
}

CellOutput RunCell(const ExperimentConfig& config, const RunSetup& setup, double avg,
                   double pct, std::size_t condition_index) {
  using Clock = std::chrono::steady_clock;
  const std::uint64_t cell_seed =
      DeriveSeed(config.base_seed, "grid-cell", condition_index, setup.run);
  const CorpusSplit& corpus = setup.corpus;
  const auto& ctx = corpus.context_feature_indices;
  const TrueTauOracle oracle(corpus.test, ctx, setup.click_model);
  const TrueTauOracle train_oracle(corpus.train, ctx, setup.click_model);

  auto wanted = [&](const char* m) {
    return std::find(config.methods.begin(), config.methods.end(), m) != config.methods.end();
  };
  const bool need_cpbm = wanted(kCpbmLtr) || wanted(kCpbmClippedIpsLtr);

  std::map<std::string, MetricReport> reports;
  for (const auto& m : config.methods) {
    MetricReport r;
    r.method = m;
    r.avg_searches = avg;
    r.pct_queries = pct;
    r.run = setup.run;
    r.rmse = r.rmse_r0 = r.rmse_r1 = r.ndcg10 = kNaN;
    reports[m] = r;
  }
  std::map<std::string, double> elapsed;
  auto fail_all = [&](const std::string& message) {
    for (auto& [name, r] : reports) {
      if (r.error.empty()) r.error = message;
    }
  };

  CellOutput out;
  try {
    // Phase a: intervention traffic on the sampled training queries.
    auto t0 = Clock::now();
    const auto sampled =
        SubsampleQueries(corpus.train, pct, DeriveSeed(cell_seed, "query-subsample"));
    const auto log_a = RunSimulation(sampled, setup.production_ranker, ctx, setup.click_model,
                                     {avg, true}, DeriveSeed(cell_seed, "phase-a-clicks"));
    // Phase b: observational control traffic on every training query.
    const auto log_b =
        RunSimulation(corpus.train, setup.production_ranker, ctx, setup.click_model,
                      {avg, false}, DeriveSeed(cell_seed, "phase-b-clicks"));
    const double shared =
        std::chrono::duration<double>(Clock::now() - t0).count();

    std::optional<CpbmModel> cpbm;
    std::string cpbm_error;
    std::vector<IpsWeightedClick> clipped_weights;
    if (need_cpbm) {
      t0 = Clock::now();
      try {
        CpbmHyper hyper = config.cpbm;
        hyper.k_max = config.k_max;
        hyper.seed = DeriveSeed(cell_seed, "cpbm");
        cpbm = CpbmModel::Fit(BuildCpbmDataset(log_a, config.k_max), hyper);
        clipped_weights = IpsWeights(log_b, CpbmPropensity(*cpbm), config.ips_clip);
      } catch (const Error& e) {
        cpbm_error = std::string("cpbm: ") + e.what();
      }
      elapsed["cpbm"] = std::chrono::duration<double>(Clock::now() - t0).count();
    }

    auto evaluate = [&](MetricReport& r, const TauEstimateFunction& tau,
                        const LinearRankModel& model) {
      const TauRmseReport rmse = TauRmse(tau, oracle, corpus.test);
      r.rmse = rmse.rmse;
      r.rmse_r0 = rmse.rmse_r0;
      r.rmse_r1 = rmse.rmse_r1;
      r.ndcg10 = NdcgAt10(model, corpus.test);
    };

    for (const auto& m : config.methods) {
      MetricReport& r = reports[m];
      const auto start = Clock::now();
      try {
        if (m == kCpbmLtr || m == kCpbmClippedIpsLtr) {
          if (!cpbm) throw FitError(cpbm_error);
          const bool clipped = m == kCpbmClippedIpsLtr;
          const auto weights =
              clipped ? clipped_weights
                      : IpsWeights(log_b, CpbmPropensity(*cpbm), std::nullopt);
          const auto model =
              TrainOnLists(IpsTrainingLists(log_b, weights), corpus.train, corpus.feature_dim,
                           config.ltr, DeriveSeed(cell_seed, "ltr", clipped ? 1 : 0));
          const CpbmModel& fitted = *cpbm;
          evaluate(r, [&](std::span<const double> x, int k) { return fitted.Tau(x, k); }, model);
          r.wallclock_s = elapsed["cpbm"];
        } else {
          const HteMethod method =
              m == kCausalForestLtr ? HteMethod::kCausalForest : HteMethod::kXLearner;
          HteConfig hte{config.causal_forest, config.x_learner_base};
          const auto bank = FitBank(log_a, method, hte, DeriveSeed(cell_seed, "bank/" + m),
                                    config.k_max);
          const auto examples =
              CorrectAndResample(log_b, BankTau(bank), DeriveSeed(cell_seed, "resample/" + m));
          const auto model =
              TrainOnLists(ResampledTrainingLists(examples), corpus.train, corpus.feature_dim,
                           config.ltr, DeriveSeed(cell_seed, "ltr/" + m));
          evaluate(r, [&](std::span<const double> x, int k) { return bank.Predict(x, k); },
                   model);
          if (config.dump_ctr) {
            auto dump = BuildCtrDump(m, examples, train_oracle, clipped_weights);
            out.ctr_dump.insert(out.ctr_dump.end(), std::make_move_iterator(dump.begin()),
                                std::make_move_iterator(dump.end()));
          }
          r.wallclock_s = 0.0;
        }
      } catch (const Error& e) {
        r.error = e.what();
        r.rmse = r.rmse_r0 = r.rmse_r1 = r.ndcg10 = kNaN;
      }
      r.wallclock_s += shared + std::chrono::duration<double>(Clock::now() - start).count();
    }
  } catch (const Error& e) {
    fail_all(e.what());
  } catch (const std::exception& e) {
    fail_all(std::string("internal error: ") + e.what());
  }

  for (const auto& m : config.methods) {
    MetricReport r = reports[m];
    if (!config.record_wallclock) r.wallclock_s = 0.0;
    out.rows.push_back(std::move(r));
  }
  return out;
}

void WriteFile(const fs::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << content;
}

}  // namespace

std::string FormatNumber(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

void ExperimentConfig::Validate() const {
  if (avg_searches_per_query.empty() || pct_training_queries.empty()) {
    throw ValidationError("condition grids must be non-empty");
  }
  for (const double a : avg_searches_per_query) {
    if (!(a > 0.0)) throw ValidationError("avg_searches_per_query values must be > 0");
  }
  for (const double p : pct_training_queries) {
    if (!(p > 0.0 && p <= 1.0)) {
      throw ValidationError("pct_training_queries values must lie in (0, 1]");
    }
  }
  if (n_runs < 1) throw ValidationError("n_runs must be >= 1");
  if (methods.empty()) throw ValidationError("methods must be non-empty");
  std::set<std::string> seen;
  for (const auto& m : methods) {
    if (!IsKnownMethod(m)) throw ValidationError("unknown method '" + m + "'");
    if (!seen.insert(m).second) throw ValidationError("duplicate method '" + m + "'");
  }
  if (k_max < 2) throw ValidationError("k_max must be >= 2");
  if (n_context_features < 1) throw ValidationError("n_context_features must be >= 1");
  if (letor_path.empty()) {
    if (synthetic.n_queries < 5 || synthetic.docs_per_query < 2 || synthetic.feature_dim < 1) {
      throw ValidationError("synthetic corpus needs >= 5 queries, >= 2 documents, >= 1 feature");
    }
    if (n_context_features > synthetic.feature_dim) {
      throw ValidationError("n_context_features exceeds feature_dim");
    }
  }
  if (!(production_fraction > 0.0 && production_fraction <= 1.0)) {
    throw ValidationError("production ranker fraction must lie in (0, 1]");
  }
  if (!(ips_clip.lo > 0.0 && ips_clip.lo < ips_clip.hi && ips_clip.hi <= 1.0)) {
    throw ValidationError("ips clip needs 0 < lo < hi <= 1");
  }
  if (n_workers < 0) throw ValidationError("n_workers must be >= 0");
  causal_forest.Validate();
  x_learner_base.Validate();
  feature_importance.Validate();
}

json ExperimentConfig::ToJson() const {
  return {
      {"corpus",
       {{"letor_path", letor_path},
        {"synthetic",
         {{"n_queries", synthetic.n_queries},
          {"docs_per_query", synthetic.docs_per_query},
          {"feature_dim", synthetic.feature_dim},
          {"label_noise", synthetic.label_noise},
          {"n_informative", synthetic.n_informative}}}}},
      {"n_context_features", n_context_features},
      {"avg_searches_per_query", avg_searches_per_query},
      {"pct_training_queries", pct_training_queries},
      {"methods", methods},
      {"n_runs", n_runs},
      {"base_seed", base_seed},
      {"click_model", {{"k_max", k_max}, {"noise_click_prob", noise_click_prob}}},
      {"production_ranker", {{"fraction", production_fraction}}},
      {"ltr",
       {{"l2", ltr.l2}, {"learning_rate", ltr.learning_rate}, {"epochs", ltr.epochs}}},
      {"cpbm",
       {{"hidden1", cpbm.hidden1},
        {"hidden2", cpbm.hidden2},
        {"learning_rate", cpbm.learning_rate},
        {"epochs", cpbm.epochs},
        {"batch_size", cpbm.batch_size}}},
      {"causal_forest", ForestToJson(causal_forest)},
      {"x_learner", ForestToJson(x_learner_base)},
      {"feature_importance", ForestToJson(feature_importance)},
      {"ips_clip", {{"lo", ips_clip.lo}, {"hi", ips_clip.hi}}},
      {"n_workers", n_workers},
      {"record_wallclock", record_wallclock},
      {"dump_ctr", dump_ctr},
  };
}

ExperimentConfig ExperimentConfig::FromJson(const json& j) {
  ExperimentConfig c;
  try {
    CheckKeys(j,
              {"corpus", "n_context_features", "avg_searches_per_query",
               "pct_training_queries", "methods", "n_runs", "base_seed", "click_model",
               "production_ranker", "ltr", "cpbm", "causal_forest", "x_learner",
               "feature_importance", "ips_clip", "n_workers", "record_wallclock", "dump_ctr"},
              "config");
    if (j.contains("corpus")) {
      const json& jc = j.at("corpus");
      CheckKeys(jc, {"letor_path", "synthetic"}, "corpus");
      Read(jc, "letor_path", c.letor_path);
      if (jc.contains("synthetic")) {
        const json& js = jc.at("synthetic");
        CheckKeys(js,
                  {"n_queries", "docs_per_query", "feature_dim", "label_noise", "n_informative"},
                  "corpus.synthetic");
        Read(js, "n_queries", c.synthetic.n_queries);
        Read(js, "docs_per_query", c.synthetic.docs_per_query);
        Read(js, "feature_dim", c.synthetic.feature_dim);
        Read(js, "label_noise", c.synthetic.label_noise);
        Read(js, "n_informative", c.synthetic.n_informative);
      }
    }
    Read(j, "n_context_features", c.n_context_features);
    Read(j, "avg_searches_per_query", c.avg_searches_per_query);
    Read(j, "pct_training_queries", c.pct_training_queries);
    Read(j, "methods", c.methods);
    Read(j, "n_runs", c.n_runs);
    Read(j, "base_seed", c.base_seed);
    if (j.contains("click_model")) {
      const json& jm = j.at("click_model");
      CheckKeys(jm, {"k_max", "noise_click_prob"}, "click_model");
      Read(jm, "k_max", c.k_max);
      Read(jm, "noise_click_prob", c.noise_click_prob);
    }
    if (j.contains("production_ranker")) {
      CheckKeys(j.at("production_ranker"), {"fraction"}, "production_ranker");
      Read(j.at("production_ranker"), "fraction", c.production_fraction);
    }
    if (j.contains("ltr")) {
      const json& jl = j.at("ltr");
      CheckKeys(jl, {"l2", "learning_rate", "epochs"}, "ltr");
      Read(jl, "l2", c.ltr.l2);
      Read(jl, "learning_rate", c.ltr.learning_rate);
      Read(jl, "epochs", c.ltr.epochs);
    }
    if (j.contains("cpbm")) {
      const json& jp = j.at("cpbm");
      CheckKeys(jp, {"hidden1", "hidden2", "learning_rate", "epochs", "batch_size"}, "cpbm");
      Read(jp, "hidden1", c.cpbm.hidden1);
      Read(jp, "hidden2", c.cpbm.hidden2);
      Read(jp, "learning_rate", c.cpbm.learning_rate);
      Read(jp, "epochs", c.cpbm.epochs);
      Read(jp, "batch_size", c.cpbm.batch_size);
    }
    if (j.contains("causal_forest")) {
      c.causal_forest = ForestFromJson(j.at("causal_forest"), c.causal_forest, "causal_forest");
    }
    if (j.contains("x_learner")) {
      c.x_learner_base = ForestFromJson(j.at("x_learner"), c.x_learner_base, "x_learner");
    }
    if (j.contains("feature_importance")) {
      c.feature_importance =
          ForestFromJson(j.at("feature_importance"), c.feature_importance, "feature_importance");
    }
    if (j.contains("ips_clip")) {
      CheckKeys(j.at("ips_clip"), {"lo", "hi"}, "ips_clip");
      Read(j.at("ips_clip"), "lo", c.ips_clip.lo);
      Read(j.at("ips_clip"), "hi", c.ips_clip.hi);
    }
    Read(j, "n_workers", c.n_workers);
    Read(j, "record_wallclock", c.record_wallclock);
    Read(j, "dump_ctr", c.dump_ctr);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad config value: ") + e.what());
  }
  c.Validate();
  return c;
}

ExperimentConfig ExperimentConfig::FromFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(0, path + ": " + e.what());
  }
  return FromJson(j);
}

ExperimentConfig ExperimentConfig::FullGrid() {
  ExperimentConfig c;
  c.avg_searches_per_query = {5.0, 10.0, 25.0, 50.0};
  c.pct_training_queries = {0.01, 0.10, 0.50, 1.00};
  c.n_runs = 3;
  return c;
}

nlohmann::json ClickModelToJson(const ClickModelParams& params) {
  return {{"format", "cfltr-click-model"},
          {"version", 1},
          {"w", params.w},
          {"k_max", params.k_max},
          {"noise_click_prob", params.noise_click_prob}};
}

ClickModelParams ClickModelFromJson(const nlohmann::json& j) {
  if (j.value("format", "") != "cfltr-click-model" || j.value("version", 0) != 1) {
    throw ValidationError("not a version 1 click-model document");
  }
  ClickModelParams p;
  p.w = j.at("w").get<std::vector<double>>();
  p.k_max = j.at("k_max").get<int>();
  p.noise_click_prob = j.at("noise_click_prob").get<double>();
  p.Validate();
  return p;
}

RunSetup PrepareRun(const ExperimentConfig& config, int run,
                    const std::vector<QueryGroup>* letor_groups) {
  const std::uint64_t run_seed = DeriveSeed(config.base_seed, "run", run);
  RunSetup setup;
  setup.run = run;
  if (config.letor_path.empty()) {
    const auto& s = config.synthetic;
    SyntheticCorpusOptions options;
    options.label_noise = s.label_noise;
    options.n_informative = s.n_informative;
    setup.corpus = GenerateSyntheticCorpus(s.n_queries, s.docs_per_query, s.feature_dim,
                                           DeriveSeed(run_seed, "synthetic-corpus"), options);
  } else {
    std::vector<QueryGroup> parsed;
    if (!letor_groups) parsed = ParseLetorFile(config.letor_path);
    const auto& groups = letor_groups ? *letor_groups : parsed;
    int dim = 0;
    for (const auto& g : groups) {
      for (const auto& d : g.documents) dim = std::max<int>(dim, d.features.size());
    }
    setup.corpus = NormalizeFeatures(SplitCorpus(groups, dim, DeriveSeed(run_seed, "split")));
  }
  setup.corpus.context_feature_indices = SelectContextFeatures(
      setup.corpus.train, setup.corpus.validation, config.n_context_features,
      DeriveSeed(run_seed, "context-features"), config.feature_importance);
  setup.corpus.Validate();
  auto production = TrainProductionRanker(setup.corpus, config.production_fraction,
                                          DeriveSeed(run_seed, "production-ranker"), config.ltr);
  setup.production_ranker = std::move(production.model);
  setup.warning = production.warning;
  setup.click_model =
      ClickModelParams::Draw(static_cast<int>(setup.corpus.context_feature_indices.size()),
                             DeriveSeed(run_seed, "click-model"), config.k_max,
                             config.noise_click_prob);
  return setup;
}

std::vector<CtrDumpRow> BuildCtrDump(const std::string& method,
                                     const std::vector<CorrectedExample>& examples,
                                     const TrueTauOracle& oracle,
                                     const std::vector<IpsWeightedClick>& ips) {
  std::unordered_map<std::string, double> ips_sum;
  for (const auto& w : ips) ips_sum[PairKey(w.query_id, w.doc_index)] += w.weight;
  std::vector<CtrDumpRow> rows;
  rows.reserve(examples.size());
  for (const auto& e : examples) {
    CtrDumpRow r;
    r.method = method;
    r.query_id = e.query_id;
    r.doc_index = e.doc_index;
    r.position = e.position;
    r.binary_rel = oracle.BinaryRel(e.query_id, e.doc_index);
    r.n_obs = e.n_obs;
    r.ctr_obs = e.ctr_obs;
    r.tau_hat = e.tau_hat;
    r.theta = e.theta;
    r.resampled_clicks = e.resampled_clicks;
    r.true_ctr = oracle.ClickProb(e.query_id, e.doc_index, 1);
    if (ips.empty()) {
      r.ips_ctr = kNaN;
    } else {
      const auto it = ips_sum.find(PairKey(e.query_id, e.doc_index));
      r.ips_ctr = (it == ips_sum.end() ? 0.0 : it->second) / e.n_obs;
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

void WriteCtrDump(std::ostream& out, const std::vector<CtrDumpRow>& rows) {
  out << "method,query_id,doc_index,position,binary_rel,n_obs,ctr_obs,tau_hat,theta,"
         "resampled_clicks,true_ctr,ips_ctr\n";
  for (const auto& r : rows) {
    out << r.method << ',' << r.query_id << ',' << r.doc_index << ',' << r.position << ','
        << r.binary_rel << ',' << r.n_obs << ',' << FormatNumber(r.ctr_obs) << ','
        << FormatNumber(r.tau_hat) << ',' << FormatNumber(r.theta) << ','
        << r.resampled_clicks << ',' << FormatNumber(r.true_ctr) << ','
        << FormatNumber(r.ips_ctr) << '\n';
  }
}

void WriteResults(std::ostream& out, const std::vector<MetricReport>& rows) {
  out << "method,avg_searches,pct_queries,run,rmse,rmse_r0,rmse_r1,ndcg10,wallclock_s\n";
  for (const auto& r : rows) {
    out << r.method << ',' << FormatNumber(r.avg_searches) << ','
        << FormatNumber(r.pct_queries) << ',' << r.run << ',' << FormatNumber(r.rmse) << ','
        << FormatNumber(r.rmse_r0) << ',' << FormatNumber(r.rmse_r1) << ','
        << FormatNumber(r.ndcg10) << ',' << FormatNumber(r.wallclock_s) << '\n';
  }
}

std::vector<MetricReport> ReadResults(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) ||
      line != "method,avg_searches,pct_queries,run,rmse,rmse_r0,rmse_r1,ndcg10,wallclock_s") {
    throw ParseError(1, "unexpected results header");
  }
  std::vector<MetricReport> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = SplitCsvLine(line);
    if (f.size() != 9) throw ParseError(line_no, "expected 9 fields");
    try {
      MetricReport r;
      r.method = f[0];
      r.avg_searches = ParseDouble(f[1]);
      r.pct_queries = ParseDouble(f[2]);
      r.run = std::stoi(f[3]);
      r.rmse = ParseDouble(f[4]);
      r.rmse_r0 = ParseDouble(f[5]);
      r.rmse_r1 = ParseDouble(f[6]);
      r.ndcg10 = ParseDouble(f[7]);
      r.wallclock_s = ParseDouble(f[8]);
      rows.push_back(std::move(r));
    } catch (const ParseError& e) {
      throw ParseError(line_no, e.what());
    } catch (const std::logic_error&) {
      throw ParseError(line_no, "bad run index");
    }
  }
  return rows;
}

void WritePValues(std::ostream& out, const std::vector<PValueRow>& rows) {
  out << "method,avg_searches,pct_queries,p_vs_cpbm_ltr\n";
  for (const auto& r : rows) {
    out << r.method << ',' << FormatNumber(r.avg_searches) << ','
        << FormatNumber(r.pct_queries) << ',' << FormatNumber(r.p_vs_cpbm_ltr) << '\n';
  }
}

std::vector<PValueRow> ComputePValues(const ExperimentConfig& config,
                                      const std::vector<MetricReport>& rows) {
  std::vector<PValueRow> out;
  if (std::find(config.methods.begin(), config.methods.end(), kCpbmLtr) ==
      config.methods.end()) {
    return out;
  }
  auto samples = [&](const std::string& method, double avg, double pct) {
    std::vector<double> v;
    for (const auto& r : rows) {
      if (r.method == method && r.avg_searches == avg && r.pct_queries == pct &&
          std::isfinite(r.ndcg10)) {
        v.push_back(r.ndcg10);
      }
    }
    return v;
  };
  for (const double avg : config.avg_searches_per_query) {
    for (const double pct : config.pct_training_queries) {
      const auto base = samples(kCpbmLtr, avg, pct);
      for (const auto& m : config.methods) {
        if (m == kCpbmLtr) continue;
        const auto other = samples(m, avg, pct);
        PValueRow p{m, avg, pct, kNaN};
        if (base.size() >= 2 && other.size() >= 2) {
          p.p_vs_cpbm_ltr = WelchTTest(other, base).p_two_sided;
        }
        out.push_back(p);
      }
    }
  }
  return out;
}

ExperimentResult RunExperiment(const ExperimentConfig& config, const std::string& output_dir) {
  config.Validate();
  std::vector<QueryGroup> letor;
  if (!config.letor_path.empty()) letor = ParseLetorFile(config.letor_path);

  std::vector<RunSetup> setups(config.n_runs);
  std::vector<std::string> setup_errors(config.n_runs);
  ParallelFor(setups.size(), std::max(1, config.n_workers), [&](std::size_t r) {
    try {
      setups[r] = PrepareRun(config, static_cast<int>(r),
                             config.letor_path.empty() ? nullptr : &letor);
    } catch (const Error& e) {
      setup_errors[r] = std::string("run setup: ") + e.what();
    }
  });

  struct Cell {
    std::size_t condition = 0;
    double avg = 0.0;
    double pct = 0.0;
    int run = 0;
  };
  std::vector<Cell> cells;
  std::size_t condition = 0;
  for (const double avg : config.avg_searches_per_query) {
    for (const double pct : config.pct_training_queries) {
      for (int run = 0; run < config.n_runs; ++run) cells.push_back({condition, avg, pct, run});
      ++condition;
    }
  }

  std::vector<CellOutput> outputs(cells.size());
  ParallelFor(cells.size(), std::max(1, config.n_workers), [&](std::size_t i) {
    const Cell& c = cells[i];
    if (!setup_errors[c.run].empty()) {
      for (const auto& m : config.methods) {
        MetricReport r;
        r.method = m;
        r.avg_searches = c.avg;
        r.pct_queries = c.pct;
        r.run = c.run;
        r.rmse = r.rmse_r0 = r.rmse_r1 = r.ndcg10 = kNaN;
        r.error = setup_errors[c.run];
        outputs[i].rows.push_back(std::move(r));
      }
      return;
    }
    outputs[i] = RunCell(config, setups[c.run], c.avg, c.pct, c.condition);
  });

  ExperimentResult result;
  for (const auto& o : outputs) {
    result.rows.insert(result.rows.end(), o.rows.begin(), o.rows.end());
  }
  result.pvalues = ComputePValues(config, result.rows);

  if (!output_dir.empty()) {
    const fs::path dir(output_dir);
    fs::create_directories(dir);
    std::ostringstream results, pvalues, errors;
    WriteResults(results, result.rows);
    WritePValues(pvalues, result.pvalues);
    errors << "method,avg_searches,pct_queries,run,error\n";
    for (const auto& r : result.rows) {
      if (r.error.empty()) continue;
      std::string message = r.error;
      std::replace(message.begin(), message.end(), ',', ';');
      std::replace(message.begin(), message.end(), '\n', ' ');
      errors << r.method << ',' << FormatNumber(r.avg_searches) << ','
             << FormatNumber(r.pct_queries) << ',' << r.run << ',' << message << '\n';
    }
    WriteFile(dir / "results.csv", results.str());
    WriteFile(dir / "pvalues.csv", pvalues.str());
    WriteFile(dir / "errors.csv", errors.str());
    WriteFile(dir / "config.json", config.ToJson().dump(2) + "\n");
    if (config.dump_ctr) {
      fs::create_directories(dir / "ctr");
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (outputs[i].ctr_dump.empty()) continue;
        std::ostringstream dump;
        WriteCtrDump(dump, outputs[i].ctr_dump);
        WriteFile(dir / "ctr" / ("ctr_" + CellTag(cells[i].avg, cells[i].pct, cells[i].run) +
                                 ".csv"),
                  dump.str());
      }
    }
  }
  return result;
}

std::string EmitPlotData(const std::string& results_dir, const std::string& kind,
                         const std::string& out_dir) {
  if (kind != "rmse_by_condition" && kind != "ndcg_box" && kind != "ctr_distributions") {
    throw ValidationError("unknown plot kind '" + kind +
                          "' (expected rmse_by_condition, ndcg_box or ctr_distributions)");
  }
  const fs::path in_dir(results_dir);
  fs::create_directories(out_dir);
  const fs::path out_path = fs::path(out_dir) / (kind + ".csv");
  std::ostringstream out;

  if (kind == "ctr_distributions") {
    const fs::path ctr_dir = in_dir / "ctr";
    if (!fs::is_directory(ctr_dir)) throw Error("no ctr/ dumps under " + results_dir);
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(ctr_dir)) {
      if (entry.path().extension() == ".csv") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    out << "cell,method,query_id,doc_index,binary_rel,stratum,observed_ctr,corrected_theta,"
           "true_ctr,ips_ctr\n";
    for (const auto& path : files) {
      std::ifstream in(path);
      std::string line;
      std::getline(in, line);
      std::string cell = path.stem().string();
      if (cell.rfind("ctr_", 0) == 0) cell = cell.substr(4);
      std::size_t line_no = 1;
      while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = SplitCsvLine(line);
        if (f.size() != 12) throw ParseError(line_no, path.string() + ": expected 12 fields");
        const int rel = std::stoi(f[4]);
        const double ctr = ParseDouble(f[6]);
        const char* stratum = "other";
        if (rel == 1 && ctr == 0.0) stratum = "false_negative";
        if (rel == 0 && ctr > 0.0) stratum = "false_positive";
        out << cell << ',' << f[0] << ',' << f[1] << ',' << f[2] << ',' << rel << ','
            << stratum << ',' << f[6] << ',' << f[8] << ',' << f[10] << ',' << f[11] << '\n';
      }
    }
  } else {
    std::ifstream in(in_dir / "results.csv");
    if (!in) throw Error("no results.csv under " + results_dir);
    const auto rows = ReadResults(in);
    if (kind == "ndcg_box") {
      out << "method,avg_searches,pct_queries,run,ndcg10\n";
      for (const auto& r : rows) {
        out << r.method << ',' << FormatNumber(r.avg_searches) << ','
            << FormatNumber(r.pct_queries) << ',' << r.run << ',' << FormatNumber(r.ndcg10)
            << '\n';
      }
    } else {
      out << "method,avg_searches,pct_queries,run,stratum,rmse\n";
      for (const auto& r : rows) {
        const std::pair<const char*, double> strata[] = {
            {"all", r.rmse}, {"r0", r.rmse_r0}, {"r1", r.rmse_r1}};
        for (const auto& [name, value] : strata) {
          out << r.method << ',' << FormatNumber(r.avg_searches) << ','
              << FormatNumber(r.pct_queries) << ',' << r.run << ',' << name << ','
              << FormatNumber(value) << '\n';
        }
      }
    }
  }
  WriteFile(out_path, out.str());
  return out_path.string();
}

}  // namespace cfltr
