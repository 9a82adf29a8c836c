#ifndef CFLTR_EVAL_H_
#define CFLTR_EVAL_H_

#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cfltr/clicksim.h"
#include "cfltr/corpus.h"
#include "cfltr/ltr.h"

namespace cfltr {

// Ground-truth treatment effect under the simulated click model:
// tau*_k(x) = P(C | x, 1) - P(C | x, k).
class TrueTauOracle {
 public:
  TrueTauOracle(const std::vector<QueryGroup>& groups, std::vector<int> context_indices,
                ClickModelParams params);

  static double TrueTau(std::span<const double> x, int binary_rel, int k,
                        const ClickModelParams& params);

  // Throws LookupError for an unknown (query, document).
  double TrueTau(const std::string& query_id, int doc_index, int k) const;
  double ClickProb(const std::string& query_id, int doc_index, int k) const;
  int BinaryRel(const std::string& query_id, int doc_index) const;
  const std::vector<double>& Context(const std::string& query_id, int doc_index) const;

  const ClickModelParams& params() const { return params_; }
  const std::vector<int>& context_indices() const { return context_indices_; }

 private:
  struct Entry {
    std::vector<double> context;
    int binary_rel = 0;
  };
  const Entry& Find(const std::string& query_id, int doc_index) const;

  std::vector<int> context_indices_;
  ClickModelParams params_;
  std::unordered_map<std::string, Entry> entries_;
};

using TauEstimateFunction = std::function<double(std::span<const double> x, int k)>;

struct TauRmseReport {
  double rmse = 0.0;
  double rmse_r0 = 0.0;  // NaN when the stratum is empty.
  double rmse_r1 = 0.0;
  std::size_t n = 0;  // Number of (document, position) terms.
  std::size_t n_r0 = 0;
  std::size_t n_r1 = 0;
};

// RMSE of estimated against true effects over every document of `test` and
// every position k in {2..K}, overall and split by true binary relevance.
TauRmseReport TauRmse(const TauEstimateFunction& estimate, const TrueTauOracle& oracle,
                      const std::vector<QueryGroup>& test);

// DCG with gain rel and discount log2(rank + 1) over the first `cutoff` entries.
double Dcg(std::span<const int> ranked_relevance, int cutoff = 10);

// nDCG of one ranked list; the ideal ordering sorts all relevance labels.
double QueryNdcg(std::span<const int> ranked_relevance, int cutoff = 10);

// Mean nDCG@10 over queries with at least one relevant document, ranking by
// descending model score with ties toward the lower document index. Throws
// ValidationError when no query has a relevant document.
double NdcgAt10(const LinearRankModel& model, const std::vector<QueryGroup>& test);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p_two_sided = 1.0;
};

// Welch's unequal-variance two-sample t-test. Zero variance in both samples
// yields p = 1 for equal means and p = 0 otherwise.
WelchResult WelchTTest(std::span<const double> a, std::span<const double> b);

// Regularized incomplete beta I_x(a, b) by continued fraction.
double RegularizedIncompleteBeta(double a, double b, double x);

double StudentTCdf(double t, double df);

struct MetricReport {
  std::string method;
  double avg_searches = 0.0;
  double pct_queries = 0.0;
  int run = 0;
  double rmse = 0.0;
  double rmse_r0 = 0.0;
  double rmse_r1 = 0.0;
  double ndcg10 = 0.0;
  double wallclock_s = 0.0;
  std::string error;  // Non-empty for a failed grid cell.
};

}  // namespace cfltr

#endif  // CFLTR_EVAL_H_
