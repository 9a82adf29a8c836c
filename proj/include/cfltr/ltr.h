#ifndef CFLTR_LTR_H_
#define CFLTR_LTR_H_

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cfltr/corpus.h"

namespace cfltr {

class LinearRankModel {
 public:
  LinearRankModel() = default;
  explicit LinearRankModel(std::vector<double> weights, double l2 = 0.0,
                           std::uint64_t seed = 0)
      : weights_(std::move(weights)), l2_(l2), seed_(seed) {}

  double Score(std::span<const double> features) const;

  const std::vector<double>& weights() const { return weights_; }
  std::vector<double>& mutable_weights() { return weights_; }
  double l2() const { return l2_; }
  std::uint64_t seed() const { return seed_; }
  int epochs() const { return epochs_; }
  double learning_rate() const { return learning_rate_; }
  void set_training_metadata(int epochs, double learning_rate) {
    epochs_ = epochs;
    learning_rate_ = learning_rate;
  }

  // Text form: a header line `cfltr-linear-model v1 feature_dim=<d> l2=<l2>
  // seed=<seed>` followed by one weight per line.
  void Save(std::ostream& out) const;
  static LinearRankModel Load(std::istream& in);

 private:
  std::vector<double> weights_;
  double l2_ = 0.0;
  std::uint64_t seed_ = 0;
  int epochs_ = 0;
  double learning_rate_ = 0.0;
};

// One document of a training list. `weight` is the IPS weight or the
// resampled click multiplicity for positives. `negative_weight` is the mass
// with which the document acts as the lower side of a pair; a negative value
// means 1 for label 0 and 0 for label 1.
struct ListItem {
  int doc_index = 0;
  int label = 0;
  double weight = 1.0;
  double negative_weight = -1.0;
};

double NegativeMass(const ListItem& item);

struct TrainingList {
  std::string query_id;
  std::vector<ListItem> items;
};

// A preference of `positive` over `negative`. The spans view document
// features owned by the corpus, which must outlive the pair.
struct WeightedPair {
  std::span<const double> positive;
  std::span<const double> negative;
  double weight = 1.0;
};

// One pair per ordered (positive, other document) combination within each
// list; the pair weight is the positive's weight times the other document's
// negative mass. Pairs of non-positive weight are dropped.
// Throws LookupError for unknown query ids or document indices.
std::vector<WeightedPair> ExpandPairs(const std::vector<TrainingList>& lists,
                                      const std::vector<QueryGroup>& corpus);

struct PairwiseOptions {
  double l2 = 1e-4;
  double learning_rate = 0.01;
  int epochs = 100;
  std::uint64_t seed = 0;
};

// Objective (1/|P|) * sum_p w_p * max(0, 1 - (s(pos) - s(neg))) + l2 * |w|^2.
double PairwiseObjective(std::span<const WeightedPair> pairs,
                         std::span<const double> weights, double l2);
// Subgradient of the objective (gradient away from hinge kinks).
std::vector<double> PairwiseGradient(std::span<const WeightedPair> pairs,
                                     std::span<const double> weights, double l2);

// Seeded SGD over shuffled pairs, one pair per step. Throws TrainingError on
// a non-finite objective after an epoch.
LinearRankModel TrainPairwise(std::span<const WeightedPair> pairs, int feature_dim,
                              const PairwiseOptions& options);

// Binary-relevance lists with weight 1 for every document of each group.
std::vector<TrainingList> RelevanceLists(const std::vector<QueryGroup>& groups);

struct ProductionRankerResult {
  LinearRankModel model;
  double fraction_used = 0.0;
  std::string warning;
};

// Pairwise ranker fitted on a `fraction` subsample of train + validation
// query groups with true binary labels. Falls back to 10% when the
// subsample yields no pairs.
ProductionRankerResult TrainProductionRanker(const CorpusSplit& corpus, double fraction,
                                             std::uint64_t seed,
                                             const PairwiseOptions& options = {});

}  // namespace cfltr

#endif  // CFLTR_LTR_H_
