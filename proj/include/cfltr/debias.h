#ifndef CFLTR_DEBIAS_H_
#define CFLTR_DEBIAS_H_

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfltr/clicksim.h"
#include "cfltr/cpbm.h"
#include "cfltr/hte.h"
#include "cfltr/ltr.h"

namespace cfltr {

// Observed click statistics of one (query, document) pair corrected to a
// position-1 click rate and redrawn.
struct CorrectedExample {
  std::string query_id;
  int doc_index = 0;
  std::vector<double> x;
  int position = 1;  // Production position where the pair was observed.
  int n_obs = 0;
  int clicks = 0;
  double ctr_obs = 0.0;
  double tau_hat = 0.0;
  double theta = 0.0;  // clamp(ctr_obs + tau_hat, 0, 1).
  int resampled_clicks = 0;
};

// Treatment-effect source for a pair observed at `position`; receives one of
// the pair's impression records.
using TauFunction = std::function<double(const ImpressionRecord& record, int position)>;

TauFunction BankTau(const TauEstimatorBank& bank);

// Groups control-arm impressions by (query, document), corrects the observed
// click rate by the estimated effect at the observed position and draws
// Binomial(n_obs, theta) clicks. Groups keep first-appearance order; group i
// draws from a stream derived from (seed, i).
std::vector<CorrectedExample> CorrectAndResample(std::span<const ImpressionRecord> control_log,
                                                 const TauFunction& tau, std::uint64_t seed);

struct IpsWeightedClick {
  std::string query_id;
  int doc_index = 0;
  int position = 1;
  double propensity = 1.0;
  double weight = 1.0;          // 1 / propensity.
  std::size_t record_index = 0;  // Index into the log the weights came from.
};

// Propensity clip [lo, hi); the upper bound maps to hi - 1e-9.
struct PropensityClip {
  double lo = 0.01;
  double hi = 1.0;
};

inline constexpr double kClipUpperEpsilon = 1e-9;

using PropensityFunction = std::function<double(std::span<const double> x, int position)>;

PropensityFunction CpbmPropensity(const CpbmModel& model);

// One entry per clicked impression; unclicked impressions get none. Throws
// Error when an unclipped propensity is not positive.
std::vector<IpsWeightedClick> IpsWeights(std::span<const ImpressionRecord> control_log,
                                         const PropensityFunction& propensity,
                                         std::optional<PropensityClip> clip);

// Per-query lists labelled 1[resampled_clicks >= 1]. Positives carry their
// resampled click count as weight; every document acts as a negative with
// its share of resampled non-clicks, so a pair (a, b) weighs
// clicks_a * (1 - clicks_b / n_obs_b).
std::vector<TrainingList> ResampledTrainingLists(const std::vector<CorrectedExample>& examples);

// Per-search lists: clicks are positives weighted by 1/propensity, other
// displayed documents are unweighted negatives.
std::vector<TrainingList> IpsTrainingLists(std::span<const ImpressionRecord> control_log,
                                           const std::vector<IpsWeightedClick>& weights);

// CSV `query_id,doc_index,n_obs,ctr_obs,tau_hat,theta,resampled_clicks`.
void WriteCorrectedExamples(std::ostream& out, const std::vector<CorrectedExample>& examples);

}  // namespace cfltr

#endif  // CFLTR_DEBIAS_H_
