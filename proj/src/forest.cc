#include "cfltr/forest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>

#include "cfltr/errors.h"
#include "cfltr/parallel.h"
#include "cfltr/random.h"

namespace cfltr {
namespace {

constexpr double kMinGain = 1e-14;
constexpr int kFormatVersion = 1;

using RowList = std::vector<std::uint32_t>;

// Sorted (value, row) pairs of one feature restricted to a node's rows.
struct SortedColumn {
  std::vector<std::pair<double, std::uint32_t>> entries;
  std::vector<double> values;

  void Load(const Matrix& x, const RowList& rows, int feature) {
    entries.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      entries[i] = {x(rows[i], feature), rows[i]};
    }
    std::sort(entries.begin(), entries.end());
    values.resize(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) values[i] = entries[i].first;
  }
};

int ResolveCandidateCount(const ForestConfig& config, std::size_t n_features) {
  int m = config.n_candidate_features;
  if (m <= 0) m = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n_features))));
  return std::clamp(m, 1, static_cast<int>(n_features));
}

std::vector<int> SampleFeatures(std::size_t n_features, int m, Rng& rng) {
  std::vector<int> all(n_features);
  std::iota(all.begin(), all.end(), 0);
  for (int i = 0; i < m; ++i) {
    const std::size_t j = i + UniformIndex(rng, n_features - i);
    std::swap(all[i], all[j]);
  }
  all.resize(m);
  std::sort(all.begin(), all.end());
  return all;
}

// Draws the per-tree subsample without replacement, in shuffled order.
RowList DrawSubsample(std::size_t n, double fraction, Rng& rng) {
  RowList rows(n);
  std::iota(rows.begin(), rows.end(), 0u);
  if (fraction >= 1.0) return rows;
  Shuffle(std::span<std::uint32_t>(rows), rng);
  const auto m = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
  rows.resize(std::min(m, n));
  return rows;
}

void Partition(const Matrix& x, const RowList& rows, int feature, double threshold,
               RowList* left, RowList* right) {
  left->clear();
  right->clear();
  for (const auto r : rows) {
    (x(r, feature) <= threshold ? left : right)->push_back(r);
  }
}

class RegressionTreeBuilder {
 public:
  RegressionTreeBuilder(const Matrix& x, std::span<const double> y,
                        const ForestConfig& config, Rng& rng)
      : x_(x), y_(y), config_(config), rng_(rng),
        n_candidates_(ResolveCandidateCount(config, x.cols())) {}

  DecisionTree Build(RowList rows) {
    nodes_.clear();
    Grow(rows, 0);
    return DecisionTree(std::move(nodes_));
  }

 private:
  struct Split {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
  };

  int Grow(const RowList& rows, int depth) {
    const int index = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    double sum = 0.0;
    for (const auto r : rows) sum += y_[r];
    const double n = static_cast<double>(rows.size());
    nodes_[index].value = rows.empty() ? 0.0 : sum / n;
    nodes_[index].n_samples = static_cast<int>(rows.size());

    if (depth >= config_.max_depth ||
        rows.size() < 2 * static_cast<std::size_t>(config_.min_leaf)) {
      return index;
    }
    const Split split = FindSplit(rows, sum);
    if (split.feature < 0) return index;

    RowList left, right;
    Partition(x_, rows, split.feature, split.threshold, &left, &right);
    const int l = Grow(left, depth + 1);
    const int r = Grow(right, depth + 1);
    TreeNode& node = nodes_[index];
    node.feature_index = split.feature;
    node.threshold = split.threshold;
    node.left = l;
    node.right = r;
    node.impurity_decrease = split.gain;
    return index;
  }

  Split FindSplit(const RowList& rows, double total) {
    Split best;
    const std::size_t n = rows.size();
    const auto min_leaf = static_cast<std::size_t>(config_.min_leaf);
    for (const int f : SampleFeatures(x_.cols(), n_candidates_, rng_)) {
      column_.Load(x_, rows, f);
      prefix_.assign(n + 1, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        prefix_[i + 1] = prefix_[i] + y_[column_.entries[i].second];
      }
      for (const std::size_t cut : CandidateCuts(column_.values, config_.max_thresholds)) {
        if (cut < min_leaf || n - cut < min_leaf) continue;
        const double nl = static_cast<double>(cut);
        const double nr = static_cast<double>(n - cut);
        const double mean_l = prefix_[cut] / nl;
        const double mean_r = (total - prefix_[cut]) / nr;
        // Reduction of the sum of squared errors.
        const double gain = nl * nr / (nl + nr) * (mean_l - mean_r) * (mean_l - mean_r);
        if (gain > best.gain && gain > kMinGain) {
          best.feature = f;
          best.gain = gain;
          best.threshold = CutThreshold(column_.values[cut - 1], column_.values[cut]);
        }
      }
    }
    return best;
  }

  const Matrix& x_;
  std::span<const double> y_;
  const ForestConfig& config_;
  Rng& rng_;
  int n_candidates_;
  std::vector<TreeNode> nodes_;
  SortedColumn column_;
  std::vector<double> prefix_;
};

struct ArmStats {
  int n_treated = 0;
  int n_control = 0;
  double sum_treated = 0.0;
  double sum_control = 0.0;

  void Add(double y, int p) {
    if (p == 1) {
      ++n_treated;
      sum_treated += y;
    } else {
      ++n_control;
      sum_control += y;
    }
  }
  bool both() const { return n_treated > 0 && n_control > 0; }
  double tau() const {
    return sum_treated / n_treated - sum_control / n_control;
  }
};

class CausalTreeBuilder {
 public:
  CausalTreeBuilder(const Matrix& x, std::span<const double> y,
                    std::span<const int> treatment, const ForestConfig& config,
                    Rng& rng)
      : x_(x), y_(y), p_(treatment), config_(config), rng_(rng),
        n_candidates_(ResolveCandidateCount(config, x.cols())) {}

  DecisionTree Build(const RowList& build, const RowList& estimate) {
    nodes_.clear();
    Grow(build, estimate, 0);
    return DecisionTree(std::move(nodes_));
  }

 private:
  struct Split {
    int feature = -1;
    double threshold = 0.0;
    double score = 0.0;
  };

  ArmStats Stats(const RowList& rows) const {
    ArmStats s;
    for (const auto r : rows) s.Add(y_[r], p_[r]);
    return s;
  }

  int Grow(const RowList& build, const RowList& estimate, int depth) {
    const int index = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    const ArmStats build_stats = Stats(build);
    const ArmStats est_stats = Stats(estimate);
    {
      TreeNode& node = nodes_[index];
      node.n_treated = est_stats.n_treated;
      node.n_control = est_stats.n_control;
      node.n_samples = est_stats.n_treated + est_stats.n_control;
      node.value = est_stats.both() ? est_stats.tau() : 0.0;
      node.build_treated = build_stats.n_treated;
      node.build_control = build_stats.n_control;
    }
    const int m = config_.min_leaf_per_arm;
    if (depth >= config_.max_depth || build_stats.n_treated < 2 * m ||
        build_stats.n_control < 2 * m) {
      return index;
    }
    const Split split = FindSplit(build, build_stats);
    if (split.feature < 0) return index;

    RowList build_l, build_r, est_l, est_r;
    Partition(x_, build, split.feature, split.threshold, &build_l, &build_r);
    Partition(x_, estimate, split.feature, split.threshold, &est_l, &est_r);
    const int l = Grow(build_l, est_l, depth + 1);
    const int r = Grow(build_r, est_r, depth + 1);
    TreeNode& node = nodes_[index];
    node.feature_index = split.feature;
    node.threshold = split.threshold;
    node.left = l;
    node.right = r;
    node.impurity_decrease = split.score * static_cast<double>(build.size());
    return index;
  }

  Split FindSplit(const RowList& rows, const ArmStats& total) {
    Split best;
    const std::size_t n = rows.size();
    const int m = config_.min_leaf_per_arm;
    std::vector<ArmStats> prefix(n + 1);
    for (const int f : SampleFeatures(x_.cols(), n_candidates_, rng_)) {
      column_.Load(x_, rows, f);
      for (std::size_t i = 0; i < n; ++i) {
        prefix[i + 1] = prefix[i];
        const auto r = column_.entries[i].second;
        prefix[i + 1].Add(y_[r], p_[r]);
      }
      for (const std::size_t cut : CandidateCuts(column_.values, config_.max_thresholds)) {
        const ArmStats& left = prefix[cut];
        ArmStats right;
        right.n_treated = total.n_treated - left.n_treated;
        right.n_control = total.n_control - left.n_control;
        right.sum_treated = total.sum_treated - left.sum_treated;
        right.sum_control = total.sum_control - left.sum_control;
        if (left.n_treated < m || left.n_control < m || right.n_treated < m ||
            right.n_control < m) {
          continue;
        }
        const double nl = static_cast<double>(cut);
        const double nr = static_cast<double>(n - cut);
        const double diff = left.tau() - right.tau();
        const double score = nl * nr / ((nl + nr) * (nl + nr)) * diff * diff;
        if (score > best.score && score > kMinGain) {
          best.feature = f;
          best.score = score;
          best.threshold = CutThreshold(column_.values[cut - 1], column_.values[cut]);
        }
      }
    }
    return best;
  }

  const Matrix& x_;
  std::span<const double> y_;
  std::span<const int> p_;
  const ForestConfig& config_;
  Rng& rng_;
  int n_candidates_;
  std::vector<TreeNode> nodes_;
  SortedColumn column_;
};

nlohmann::json TreesToJson(const std::vector<DecisionTree>& trees) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& tree : trees) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : tree.nodes()) {
      nodes.push_back({n.feature_index, n.threshold, n.left, n.right, n.value,
                       n.n_samples, n.n_treated, n.n_control, n.build_treated,
                       n.build_control, n.impurity_decrease});
    }
    out.push_back(std::move(nodes));
  }
  return out;
}

std::vector<DecisionTree> TreesFromJson(const nlohmann::json& j) {
  std::vector<DecisionTree> trees;
  for (const auto& jt : j) {
    std::vector<TreeNode> nodes;
    for (const auto& a : jt) {
      TreeNode n;
      n.feature_index = a.at(0).get<int>();
      n.threshold = a.at(1).get<double>();
      n.left = a.at(2).get<int>();
      n.right = a.at(3).get<int>();
      n.value = a.at(4).get<double>();
      n.n_samples = a.at(5).get<int>();
      n.n_treated = a.at(6).get<int>();
      n.n_control = a.at(7).get<int>();
      n.build_treated = a.at(8).get<int>();
      n.build_control = a.at(9).get<int>();
      n.impurity_decrease = a.at(10).get<double>();
      nodes.push_back(n);
    }
    trees.emplace_back(std::move(nodes));
  }
  return trees;
}

void CheckFormat(const nlohmann::json& j, const std::string& kind) {
  if (j.value("format", "") != "cfltr-forest" || j.value("kind", "") != kind ||
      j.value("version", 0) != kFormatVersion) {
    throw ValidationError("not a version " + std::to_string(kFormatVersion) +
                          " " + kind + " forest document");
  }
}

}  // namespace

std::vector<std::size_t> CandidateCuts(std::span<const double> sorted_values,
                                       int max_candidates) {
  std::vector<std::size_t> cuts;
  for (std::size_t i = 1; i < sorted_values.size(); ++i) {
    if (sorted_values[i - 1] < sorted_values[i]) cuts.push_back(i);
  }
  if (max_candidates <= 0 || cuts.size() <= static_cast<std::size_t>(max_candidates)) {
    return cuts;
  }
  std::vector<std::size_t> thinned;
  thinned.reserve(max_candidates);
  const std::size_t total = cuts.size();
  const auto m = static_cast<std::size_t>(max_candidates);
  for (std::size_t j = 0; j < m; ++j) {
    thinned.push_back(cuts[((2 * j + 1) * total) / (2 * m)]);
  }
  return thinned;
}

double CutThreshold(double below, double above) {
  const double mid = below + (above - below) / 2.0;
  return mid < above ? mid : below;
}

double DifferenceOfMeans(std::span<const double> y, std::span<const int> treatment) {
  ArmStats s;
  for (std::size_t i = 0; i < y.size(); ++i) s.Add(y[i], treatment[i]);
  if (!s.both()) throw FitError("both treatment arms must be present");
  return s.tau();
}

int DecisionTree::LeafIndex(std::span<const double> x) const {
  int i = 0;
  while (!nodes_[i].is_leaf()) {
    const TreeNode& n = nodes_[i];
    i = x[n.feature_index] <= n.threshold ? n.left : n.right;
  }
  return i;
}

const TreeNode& DecisionTree::Leaf(std::span<const double> x) const {
  return nodes_[LeafIndex(x)];
}

int DecisionTree::depth() const {
  if (nodes_.empty()) return 0;
  std::vector<std::pair<int, int>> stack{{0, 0}};
  int best = 0;
  while (!stack.empty()) {
    const auto [i, d] = stack.back();
    stack.pop_back();
    best = std::max(best, d);
    if (!nodes_[i].is_leaf()) {
      stack.push_back({nodes_[i].left, d + 1});
      stack.push_back({nodes_[i].right, d + 1});
    }
  }
  return best;
}

void ForestConfig::Validate() const {
  if (n_trees < 1) throw ValidationError("n_trees must be >= 1");
  if (max_depth < 0) throw ValidationError("max_depth must be >= 0");
  if (min_leaf < 1) throw ValidationError("min_leaf must be >= 1");
  if (min_leaf_per_arm < 1) throw ValidationError("min_leaf_per_arm must be >= 1");
  if (!(subsample_fraction > 0.0 && subsample_fraction <= 1.0)) {
    throw ValidationError("subsample_fraction must lie in (0, 1]");
  }
}

ForestConfig ForestConfig::ImportanceDefaults() {
  ForestConfig c;
  c.n_trees = 100;
  c.max_depth = 8;
  c.min_leaf = 5;
  c.subsample_fraction = 0.8;
  c.honest = false;
  return c;
}

ForestConfig ForestConfig::RegressionDefaults() {
  ForestConfig c;
  c.n_trees = 100;
  c.max_depth = 10;
  c.min_leaf = 5;
  c.subsample_fraction = 0.5;
  c.honest = false;
  return c;
}

RegressionForest RegressionForest::Fit(const Matrix& x, std::span<const double> y,
                                       const ForestConfig& config) {
  config.Validate();
  if (x.rows() != y.size()) {
    throw ValidationError("feature rows (" + std::to_string(x.rows()) +
                          ") and targets (" + std::to_string(y.size()) + ") differ");
  }
  if (y.empty()) throw ValidationError("regression forest needs at least one sample");

  RegressionForest forest;
  forest.n_features_ = x.cols();
  forest.trees_.resize(config.n_trees);
  ParallelFor(config.n_trees, config.n_threads, [&](std::size_t t) {
    Rng rng(DeriveSeed(config.seed, "regression-tree", t));
    RowList rows = DrawSubsample(x.rows(), config.subsample_fraction, rng);
    RegressionTreeBuilder builder(x, y, config, rng);
    forest.trees_[t] = builder.Build(std::move(rows));
  });
  return forest;
}

double RegressionForest::Predict(std::span<const double> x) const {
  if (x.size() != n_features_) {
    throw ValidationError("expected " + std::to_string(n_features_) +
                          " features, got " + std::to_string(x.size()));
  }
  double sum = 0.0;
  for (const auto& tree : trees_) sum += tree.Leaf(x).value;
  return sum / static_cast<double>(trees_.size());
}

std::vector<double> RegressionForest::Predict(const Matrix& x) const {
  std::vector<double> out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) out[i] = Predict(x.row(i));
  return out;
}

std::vector<double> RegressionForest::FeatureImportance() const {
  std::vector<double> importance(n_features_, 0.0);
  for (const auto& tree : trees_) {
    for (const auto& node : tree.nodes()) {
      if (!node.is_leaf()) importance[node.feature_index] += node.impurity_decrease;
    }
  }
  const double total = std::accumulate(importance.begin(), importance.end(), 0.0);
  if (total <= 0.0) return std::vector<double>(n_features_, 0.0);
  // Averaging over trees cancels under normalization.
  for (auto& v : importance) v /= total;
  return importance;
}

nlohmann::json RegressionForest::ToJson() const {
  return {{"format", "cfltr-forest"},
          {"version", kFormatVersion},
          {"kind", "regression"},
          {"n_features", n_features_},
          {"trees", TreesToJson(trees_)}};
}

RegressionForest RegressionForest::FromJson(const nlohmann::json& j) {
  CheckFormat(j, "regression");
  RegressionForest f;
  f.n_features_ = j.at("n_features").get<std::size_t>();
  f.trees_ = TreesFromJson(j.at("trees"));
  return f;
}

CausalForest CausalForest::Fit(const Matrix& x, std::span<const double> y,
                               std::span<const int> treatment,
                               const ForestConfig& config) {
  config.Validate();
  if (x.rows() != y.size() || y.size() != treatment.size()) {
    throw ValidationError("features, outcomes and treatments differ in length");
  }
  for (const int p : treatment) {
    if (p != 0 && p != 1) throw ValidationError("treatment indicators must be 0 or 1");
  }
  CausalForest forest;
  forest.n_features_ = x.cols();
  forest.global_tau_ = DifferenceOfMeans(y, treatment);
  forest.trees_.resize(config.n_trees);
  ParallelFor(config.n_trees, config.n_threads, [&](std::size_t t) {
    Rng rng(DeriveSeed(config.seed, "causal-tree", t));
    RowList rows = DrawSubsample(x.rows(), config.subsample_fraction, rng);
    CausalTreeBuilder builder(x, y, treatment, config, rng);
    if (config.honest && rows.size() >= 2) {
      // The subsample is already in shuffled order.
      const std::size_t half = (rows.size() + 1) / 2;
      RowList build(rows.begin(), rows.begin() + half);
      RowList estimate(rows.begin() + half, rows.end());
      forest.trees_[t] = builder.Build(build, estimate);
    } else {
      forest.trees_[t] = builder.Build(rows, rows);
    }
  });
  return forest;
}

double CausalForest::Predict(std::span<const double> x) const {
  if (x.size() != n_features_) {
    throw ValidationError("expected " + std::to_string(n_features_) +
                          " features, got " + std::to_string(x.size()));
  }
  double sum = 0.0;
  int used = 0;
  for (const auto& tree : trees_) {
    const TreeNode& leaf = tree.Leaf(x);
    if (leaf.has_both_arms()) {
      sum += leaf.value;
      ++used;
    }
  }
  return used > 0 ? sum / used : global_tau_;
}

std::vector<double> CausalForest::Predict(const Matrix& x) const {
  std::vector<double> out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) out[i] = Predict(x.row(i));
  return out;
}

nlohmann::json CausalForest::ToJson() const {
  return {{"format", "cfltr-forest"},
          {"version", kFormatVersion},
          {"kind", "causal"},
          {"n_features", n_features_},
          {"global_tau", global_tau_},
          {"trees", TreesToJson(trees_)}};
}

CausalForest CausalForest::FromJson(const nlohmann::json& j) {
  CheckFormat(j, "causal");
  CausalForest f;
  f.n_features_ = j.at("n_features").get<std::size_t>();
  f.global_tau_ = j.at("global_tau").get<double>();
  f.trees_ = TreesFromJson(j.at("trees"));
  return f;
}

}  // namespace cfltr
