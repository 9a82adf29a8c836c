#include "cfltr/hte.h"

#include <iomanip>
#include <limits>
#include <ostream>
#include <unordered_map>

#include "cfltr/errors.h"
#include "cfltr/parallel.h"
#include "cfltr/random.h"

namespace cfltr {
namespace {

constexpr int kFormatVersion = 1;

std::string PairKey(const ImpressionRecord& r) {
  std::string key = r.query_id;
  key.push_back('\x1f');
  key += std::to_string(r.doc_index);
  return key;
}

struct ArmData {
  Matrix x;
  std::vector<double> y;
};

ArmData SelectArm(const Matrix& x, std::span<const double> y, std::span<const int> p,
                  int arm) {
  ArmData d;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (p[i] != arm) continue;
    d.x.AppendRow(x.row(i));
    d.y.push_back(y[i]);
  }
  return d;
}

}  // namespace

double HteDataset::treated_fraction() const {
  if (p.empty()) return 0.0;
  std::size_t treated = 0;
  for (const int v : p) treated += v == 1;
  return static_cast<double>(treated) / static_cast<double>(p.size());
}

HteDataset BuildHteDataset(std::span<const ImpressionRecord> log, int k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("treatment-effect position must be >= 2");
  struct Tally {
    const ImpressionRecord* first = nullptr;
    int imps[2] = {0, 0};  // [0]: position 1, [1]: position k.
    int clicks[2] = {0, 0};
  };
  std::unordered_map<std::string, std::size_t> index;
  std::vector<Tally> tallies;
  for (const auto& r : log) {
    if (r.arm != 1 && r.arm != k) continue;
    if (r.position != 1 && r.position != k) continue;
    auto [it, inserted] = index.try_emplace(PairKey(r), tallies.size());
    if (inserted) tallies.push_back(Tally{&r, {0, 0}, {0, 0}});
    Tally& t = tallies[it->second];
    const int slot = r.position == 1 ? 0 : 1;
    ++t.imps[slot];
    t.clicks[slot] += r.clicked;
  }

  HteDataset data;
  data.position_k = k;
  Rng rng(DeriveSeed(seed, "hte-dataset", static_cast<std::uint64_t>(k)));
  for (const auto& t : tallies) {
    int slot;
    if (t.imps[0] > 0 && t.imps[1] > 0) {
      slot = static_cast<int>(UniformIndex(rng, 2));
    } else {
      slot = t.imps[0] > 0 ? 0 : 1;
    }
    data.x.AppendRow(t.first->context);
    data.y.push_back(static_cast<double>(t.clicks[slot]) / t.imps[slot]);
    data.p.push_back(slot == 0 ? 1 : 0);
    data.query_ids.push_back(t.first->query_id);
    data.doc_indices.push_back(t.first->doc_index);
  }
  const double f = data.treated_fraction();
  if (data.size() == 0 || f == 0.0 || f == 1.0) {
    throw FitError("position " + std::to_string(k) +
                   " dataset lacks a treated or control arm (" +
                   std::to_string(data.size()) + " rows)");
  }
  return data;
}

void WriteHteDataset(std::ostream& out, const HteDataset& data) {
  for (std::size_t j = 0; j < data.x.cols(); ++j) out << "x_" << j << ',';
  out << "y,p\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (const double v : data.x.row(i)) out << v << ',';
    out << data.y[i] << ',' << data.p[i] << '\n';
  }
}

XLearner XLearner::Fit(const Matrix& x, std::span<const double> y,
                       std::span<const int> treatment, const ForestConfig& base,
                       std::optional<double> g) {
  if (x.rows() != y.size() || y.size() != treatment.size()) {
    throw ValidationError("features, outcomes and treatments differ in length");
  }
  const ArmData control = SelectArm(x, y, treatment, 0);
  const ArmData treated = SelectArm(x, y, treatment, 1);
  if (control.y.empty() || treated.y.empty()) {
    throw FitError("X-learner needs both treated and control rows");
  }
  auto config = [&](const char* name) {
    ForestConfig c = base;
    c.seed = DeriveSeed(base.seed, name);
    return c;
  };
  // Step 1: outcome models per arm.
  const auto mu0 = RegressionForest::Fit(control.x, control.y, config("mu0"));
  const auto mu1 = RegressionForest::Fit(treated.x, treated.y, config("mu1"));
  // Step 2: imputed effects, regressed per arm.
  std::vector<double> d0(control.y.size()), d1(treated.y.size());
  for (std::size_t i = 0; i < d0.size(); ++i) d0[i] = mu1.Predict(control.x.row(i)) - control.y[i];
  for (std::size_t i = 0; i < d1.size(); ++i) d1[i] = treated.y[i] - mu0.Predict(treated.x.row(i));
  XLearner xl;
  xl.tau0_ = RegressionForest::Fit(control.x, d0, config("tau0"));
  xl.tau1_ = RegressionForest::Fit(treated.x, d1, config("tau1"));
  // Step 3 weight.
  xl.g_ = g.value_or(static_cast<double>(treated.y.size()) / static_cast<double>(y.size()));
  if (!(xl.g_ >= 0.0 && xl.g_ <= 1.0)) throw ValidationError("g must lie in [0, 1]");
  return xl;
}

XLearner XLearner::Fit(const HteDataset& data, const ForestConfig& base,
                       std::optional<double> g) {
  return Fit(data.x, data.y, data.p, base, g);
}

double XLearner::Predict(std::span<const double> x) const {
  return g_ * tau0_.Predict(x) + (1.0 - g_) * tau1_.Predict(x);
}

nlohmann::json XLearner::ToJson() const {
  return {{"format", "cfltr-xlearner"}, {"version", kFormatVersion}, {"g", g_},
          {"tau0", tau0_.ToJson()},     {"tau1", tau1_.ToJson()}};
}

XLearner XLearner::FromJson(const nlohmann::json& j) {
  if (j.value("format", "") != "cfltr-xlearner" || j.value("version", 0) != kFormatVersion) {
    throw ValidationError("not a version 1 X-learner document");
  }
  XLearner xl;
  xl.g_ = j.at("g").get<double>();
  xl.tau0_ = RegressionForest::FromJson(j.at("tau0"));
  xl.tau1_ = RegressionForest::FromJson(j.at("tau1"));
  return xl;
}

const char* HteMethodName(HteMethod method) {
  return method == HteMethod::kCausalForest ? "causal_forest" : "x_learner";
}

HteMethod ParseHteMethod(const std::string& name) {
  if (name == "causal_forest") return HteMethod::kCausalForest;
  if (name == "x_learner") return HteMethod::kXLearner;
  throw ValidationError("unknown treatment-effect method '" + name + "'");
}

TauEstimatorBank::TauEstimatorBank(HteMethod method, int k_max, std::vector<BankEntry> entries)
    : method_(method), k_max_(k_max), entries_(std::move(entries)) {
  if (entries_.size() != static_cast<std::size_t>(k_max - 1)) {
    throw ValidationError("bank needs exactly K-1 entries");
  }
}

const BankEntry& TauEstimatorBank::entry(int k) const {
  if (k < 2 || k > k_max_) {
    throw ValidationError("no estimator for position " + std::to_string(k));
  }
  return entries_[k - 2];
}

double TauEstimatorBank::Predict(std::span<const double> x, int k) const {
  if (k < 1 || k > k_max_) {
    throw ValidationError("position " + std::to_string(k) + " outside 1.." +
                          std::to_string(k_max_));
  }
  if (k == 1) return 0.0;
  return std::visit(
      [&](const auto& m) -> double {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, ConstantTau>) {
          return m.value;
        } else {
          return m.Predict(x);
        }
      },
      entries_[k - 2].model);
}

nlohmann::json TauEstimatorBank::ToJson() const {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : entries_) {
    nlohmann::json je;
    std::visit(
        [&](const auto& m) {
          using T = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<T, ConstantTau>) {
            je["constant"] = m.value;
          } else {
            je["model"] = m.ToJson();
          }
        },
        e.model);
    je["failure"] = e.failure;
    entries.push_back(std::move(je));
  }
  return {{"format", "cfltr-tau-bank"}, {"version", kFormatVersion},
          {"method", HteMethodName(method_)}, {"k_max", k_max_},
          {"entries", std::move(entries)}};
}

TauEstimatorBank TauEstimatorBank::FromJson(const nlohmann::json& j) {
  if (j.value("format", "") != "cfltr-tau-bank" || j.value("version", 0) != kFormatVersion) {
    throw ValidationError("not a version 1 estimator bank document");
  }
  const HteMethod method = ParseHteMethod(j.at("method").get<std::string>());
  std::vector<BankEntry> entries;
  for (const auto& je : j.at("entries")) {
    BankEntry e;
    e.failure = je.value("failure", "");
    if (je.contains("constant")) {
      e.model = ConstantTau{je.at("constant").get<double>()};
    } else if (method == HteMethod::kCausalForest) {
      e.model = CausalForest::FromJson(je.at("model"));
    } else {
      e.model = XLearner::FromJson(je.at("model"));
    }
    entries.push_back(std::move(e));
  }
  return TauEstimatorBank(method, j.at("k_max").get<int>(), std::move(entries));
}

double GlobalDifferenceOfMeans(std::span<const ImpressionRecord> log, int k) {
  double imps1 = 0, clicks1 = 0, impsk = 0, clicksk = 0;
  for (const auto& r : log) {
    if (r.position == 1) {
      ++imps1;
      clicks1 += r.clicked;
    } else if (r.position == k) {
      ++impsk;
      clicksk += r.clicked;
    }
  }
  if (imps1 == 0 || impsk == 0) return 0.0;
  return clicks1 / imps1 - clicksk / impsk;
}

TauEstimatorBank FitBank(std::span<const ImpressionRecord> log, HteMethod method,
                         const HteConfig& config, std::uint64_t seed, int k_max,
                         int n_threads) {
  if (k_max < 2) throw ValidationError("k_max must be >= 2");
  std::vector<BankEntry> entries(k_max - 1);
  ParallelFor(entries.size(), n_threads, [&](std::size_t i) {
    const int k = static_cast<int>(i) + 2;
    BankEntry& entry = entries[i];
    try {
      const HteDataset data = BuildHteDataset(log, k, DeriveSeed(seed, "bank-dataset", k));
      if (method == HteMethod::kCausalForest) {
        ForestConfig c = config.causal;
        c.seed = DeriveSeed(seed, "bank-causal-forest", k);
        entry.model = CausalForest::Fit(data.x, data.y, data.p, c);
      } else {
        ForestConfig c = config.base;
        c.seed = DeriveSeed(seed, "bank-x-learner", k);
        entry.model = XLearner::Fit(data, c);
      }
    } catch (const Error& e) {
      entry.failure = e.what();
      entry.model = ConstantTau{GlobalDifferenceOfMeans(log, k)};
    }
  });
  bool any_ok = false;
  for (const auto& e : entries) any_ok |= e.failure.empty();
  if (!any_ok) {
    throw FitError("every treatment-effect estimator failed; first error: " +
                   entries.front().failure);
  }
  return TauEstimatorBank(method, k_max, std::move(entries));
}

}  // namespace cfltr
