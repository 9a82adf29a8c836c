#ifndef CFLTR_HTE_H_
#define CFLTR_HTE_H_

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cfltr/clicksim.h"
#include "cfltr/forest.h"
#include "cfltr/matrix.h"
#include "json.hpp"

namespace cfltr {

// Treatment-effect data for one non-anchor position k. Treated rows (p = 1)
// carry the click rate observed at position 1, control rows (p = 0) the rate
// observed at position k.
struct HteDataset {
  int position_k = 2;
  Matrix x;
  std::vector<double> y;
  std::vector<int> p;
  // Identity of each row, for export and audits.
  std::vector<std::string> query_ids;
  std::vector<int> doc_indices;

  std::size_t size() const { return y.size(); }
  double treated_fraction() const;
};

// Restricts the log to arms {1, k}, groups by (query, document) and, per
// group, picks one of its observed positions within {1, k} uniformly at random.
// Throws FitError when the result lacks an arm.
HteDataset BuildHteDataset(std::span<const ImpressionRecord> log, int k, std::uint64_t seed);

// CSV `x_0,...,x_{t-1},y,p`.
void WriteHteDataset(std::ostream& out, const HteDataset& data);

// Three-step X-learner with regression-forest base models.
class XLearner {
 public:
  // g weighs the control-imputed model; nullopt uses the treated fraction.
  static XLearner Fit(const Matrix& x, std::span<const double> y,
                      std::span<const int> treatment, const ForestConfig& base,
                      std::optional<double> g = std::nullopt);
  static XLearner Fit(const HteDataset& data, const ForestConfig& base,
                      std::optional<double> g = std::nullopt);

  double Predict(std::span<const double> x) const;
  double PredictTau0(std::span<const double> x) const { return tau0_.Predict(x); }
  double PredictTau1(std::span<const double> x) const { return tau1_.Predict(x); }
  double g() const { return g_; }

  nlohmann::json ToJson() const;
  static XLearner FromJson(const nlohmann::json& j);

 private:
  RegressionForest tau0_;
  RegressionForest tau1_;
  double g_ = 0.5;
};

enum class HteMethod { kCausalForest, kXLearner };

const char* HteMethodName(HteMethod method);
HteMethod ParseHteMethod(const std::string& name);

struct HteConfig {
  ForestConfig causal;
  ForestConfig base = ForestConfig::RegressionDefaults();
};

// Constant estimate used when the model for a position could not be fitted.
struct ConstantTau {
  double value = 0.0;
};

struct BankEntry {
  std::variant<CausalForest, XLearner, ConstantTau> model;
  std::string failure;  // Empty unless the fit failed.
};

// One treatment-effect model per position k in {2..K}.
class TauEstimatorBank {
 public:
  TauEstimatorBank() = default;
  TauEstimatorBank(HteMethod method, int k_max, std::vector<BankEntry> entries);

  // 0 for k = 1; otherwise the model for k. Throws ValidationError for k
  // outside {1..K}.
  double Predict(std::span<const double> x, int k) const;

  HteMethod method() const { return method_; }
  int k_max() const { return k_max_; }
  const BankEntry& entry(int k) const;
  bool failed(int k) const { return !entry(k).failure.empty(); }

  nlohmann::json ToJson() const;
  static TauEstimatorBank FromJson(const nlohmann::json& j);

 private:
  HteMethod method_ = HteMethod::kCausalForest;
  int k_max_ = 0;
  std::vector<BankEntry> entries_;  // Index k - 2.
};

// Position-1 click rate minus position-k click rate over the whole log;
// 0 when either position has no impressions.
double GlobalDifferenceOfMeans(std::span<const ImpressionRecord> log, int k);

// Fits one estimator per position k in {2..k_max}. A failed fit is recorded
// and replaced by the global difference of means. Throws FitError when every
// position fails.
TauEstimatorBank FitBank(std::span<const ImpressionRecord> log, HteMethod method,
                         const HteConfig& config, std::uint64_t seed, int k_max = 10,
                         int n_threads = 1);

}  // namespace cfltr

#endif  // CFLTR_HTE_H_
