#ifndef CFLTR_CLICKSIM_H_
#define CFLTR_CLICKSIM_H_

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cfltr/corpus.h"
#include "cfltr/ltr.h"
#include "cfltr/random.h"

namespace cfltr {

struct ClickModelParams {
  std::vector<double> w;  // Examination weights over context features.
  int k_max = 10;
  double noise_click_prob = 0.1;

  // Draws each w component uniformly from [-1, 1).
  static ClickModelParams Draw(int context_dim, std::uint64_t seed, int k_max = 10,
                               double noise_click_prob = 0.1);
  void Validate() const;
};

struct ImpressionRecord {
  std::string query_id;
  int doc_index = 0;
  int position = 1;  // 1-based display position.
  int arm = 1;       // 1 = control; k > 1 swaps positions 1 and k.
  int clicked = 0;
  std::vector<double> context;
};

// Context vector of a document: its features at the selected indices.
std::vector<double> ContextOf(const Document& doc, std::span<const int> context_indices);

// round(avg * |groups|) group indices drawn uniformly with replacement.
std::vector<std::size_t> SampleSearches(const std::vector<QueryGroup>& groups,
                                        double avg_searches_per_query, std::uint64_t seed);

// Document indices by descending score (ties by ascending doc_index),
// truncated to `k_max`.
std::vector<int> RankAndTruncate(const QueryGroup& group, const LinearRankModel& ranker,
                                 int k_max = 10);

// Uniform arm in {1..k}, a pure function of (seed, counter).
int AssignArm(std::uint64_t counter, std::uint64_t seed, int k);

// Exchanges the entries at positions 1 and `arm`; a no-op for arm 1 or when
// the list is shorter than `arm`.
void ApplySwap(std::vector<int>& ranking, int arm);

// P(E=1 | x, k) = 1 / k^max(w.x + 1, 0).
double ExaminationProb(std::span<const double> x, int k, const ClickModelParams& params);

// Closed-form P(C=1 | x, k, R) = e(x,k) * (R + noise * (1 - R)).
double ClickProb(std::span<const double> x, int k, int binary_rel,
                 const ClickModelParams& params);

int GenerateClick(std::span<const double> x, int k, int binary_rel,
                  const ClickModelParams& params, Rng& rng);

struct SimulationOptions {
  double avg_searches_per_query = 5.0;
  // false logs every search in the control arm (observational traffic).
  bool interventions = true;
};

// Samples searches, ranks with the production ranker, assigns arms, swaps and
// emits one record per displayed position. Records of one search are
// contiguous and ordered by position; search i uses RNG streams derived from
// (seed, i).
std::vector<ImpressionRecord> RunSimulation(const std::vector<QueryGroup>& groups,
                                            const LinearRankModel& ranker,
                                            std::span<const int> context_indices,
                                            const ClickModelParams& params,
                                            const SimulationOptions& options,
                                            std::uint64_t seed);

// Splits a log into searches: a new search starts at every position-1 record.
std::vector<std::span<const ImpressionRecord>> SplitSearches(
    std::span<const ImpressionRecord> log);

std::vector<ImpressionRecord> ControlArm(std::span<const ImpressionRecord> log);

// CSV `query_id,doc_index,position,arm,clicked`; the sidecar holds one context
// vector per record in the same order, comma-separated.
void WriteImpressions(std::ostream& csv, std::ostream& contexts,
                      std::span<const ImpressionRecord> log);
std::vector<ImpressionRecord> ReadImpressions(std::istream& csv, std::istream& contexts);

}  // namespace cfltr

#endif  // CFLTR_CLICKSIM_H_
