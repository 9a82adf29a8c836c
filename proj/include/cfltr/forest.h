#ifndef CFLTR_FOREST_H_
#define CFLTR_FOREST_H_

#include <cstdint>
#include <span>
#include <vector>

#include "cfltr/matrix.h"
#include "json.hpp"

namespace cfltr {

// One node of a binary decision tree stored in a flat array. Internal nodes
// route x left iff x[feature_index] <= threshold.
struct TreeNode {
  int feature_index = -1;  // -1 marks a leaf.
  double threshold = 0.0;
  int left = -1;
  int right = -1;

  // Leaf payload. For regression trees `value` is the mean target and the arm
  // counters stay 0. For causal trees the counters describe the estimation
  // sample and `value` is the treated-minus-control mean difference (only
  // meaningful when both arms are populated).
  double value = 0.0;
  int n_samples = 0;
  int n_treated = 0;
  int n_control = 0;

  // Causal trees only: arm counts of the sample used to choose splits. Equal
  // to the counters above when honesty is off.
  int build_treated = 0;
  int build_control = 0;

  // Internal nodes: impurity decrease times parent sample count.
  double impurity_decrease = 0.0;

  bool is_leaf() const { return feature_index < 0; }
  bool has_both_arms() const { return n_treated > 0 && n_control > 0; }
};

class DecisionTree {
 public:
  DecisionTree() = default;
  explicit DecisionTree(std::vector<TreeNode> nodes) : nodes_(std::move(nodes)) {}

  const TreeNode& Leaf(std::span<const double> x) const;
  int LeafIndex(std::span<const double> x) const;

  const std::vector<TreeNode>& nodes() const { return nodes_; }
  int depth() const;

 private:
  std::vector<TreeNode> nodes_;
};

struct ForestConfig {
  int n_trees = 100;
  int max_depth = 12;
  // Minimum samples per child for regression trees.
  int min_leaf = 5;
  // Minimum samples of each arm per child for causal trees.
  int min_leaf_per_arm = 5;
  double subsample_fraction = 0.5;
  // 0 selects ceil(sqrt(n_features)).
  int n_candidate_features = 0;
  // Causal trees: choose splits and estimate leaves on disjoint halves.
  bool honest = true;
  // Cap on threshold candidates per feature; evenly spaced by rank.
  int max_thresholds = 64;
  std::uint64_t seed = 0;
  // Worker threads for tree fitting (0 = hardware concurrency).
  int n_threads = 1;

  void Validate() const;

  // Defaults of the impurity-importance forest used for context features.
  static ForestConfig ImportanceDefaults();
  // Defaults of the regression base learners inside the X-learner.
  static ForestConfig RegressionDefaults();
};

// Averaging ensemble of CART regression trees with variance impurity. On
// {0,1} targets variance is half the Gini impurity, so the same forest serves
// as the classifier used for feature importance.
class RegressionForest {
 public:
  static RegressionForest Fit(const Matrix& x, std::span<const double> y,
                              const ForestConfig& config);

  double Predict(std::span<const double> x) const;
  std::vector<double> Predict(const Matrix& x) const;

  // Mean-decrease-in-impurity importance normalized to sum to one; the zero
  // vector when no tree split.
  std::vector<double> FeatureImportance() const;

  const std::vector<DecisionTree>& trees() const { return trees_; }
  std::size_t n_features() const { return n_features_; }

  nlohmann::json ToJson() const;
  static RegressionForest FromJson(const nlohmann::json& j);

 private:
  std::size_t n_features_ = 0;
  std::vector<DecisionTree> trees_;
};

// Forest of causal trees. Each leaf estimates the treatment effect as the
// treated mean minus the control mean of the samples that reach it; splits
// maximize nL*nR/(nL+nR)^2 * (tauL - tauR)^2.
class CausalForest {
 public:
  // `treatment` holds 1 for treated rows and 0 for control rows. Throws
  // FitError when either arm is empty.
  static CausalForest Fit(const Matrix& x, std::span<const double> y,
                          std::span<const int> treatment,
                          const ForestConfig& config);

  // Mean of leaf effects over trees whose leaf holds both arms; the global
  // difference of arm means when no tree qualifies.
  double Predict(std::span<const double> x) const;
  std::vector<double> Predict(const Matrix& x) const;

  double global_tau() const { return global_tau_; }
  const std::vector<DecisionTree>& trees() const { return trees_; }
  std::size_t n_features() const { return n_features_; }

  nlohmann::json ToJson() const;
  static CausalForest FromJson(const nlohmann::json& j);

 private:
  std::size_t n_features_ = 0;
  double global_tau_ = 0.0;
  std::vector<DecisionTree> trees_;
};

// Difference of treated and control means; FitError if an arm is empty.
double DifferenceOfMeans(std::span<const double> y, std::span<const int> treatment);

// Split positions i (between sorted[i-1] and sorted[i]) with distinct
// neighbours, thinned to at most `max_candidates` evenly spaced by rank.
std::vector<std::size_t> CandidateCuts(std::span<const double> sorted_values,
                                       int max_candidates);

// Midpoint threshold for a cut, guaranteed to route sorted[i-1] left and
// sorted[i] right.
double CutThreshold(double below, double above);

}  // namespace cfltr

#endif  // CFLTR_FOREST_H_
