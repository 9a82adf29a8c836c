#include "cfltr/forest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "cfltr/errors.h"
#include "cfltr/random.h"

namespace cfltr {
namespace {

struct CausalData {
  Matrix x;
  std::vector<double> y;
  std::vector<int> p;
};

// tau(x) = 0.4 * 1[x0 > 0.5]; baseline 0.2 + 0.1 * x1; noiseless.
CausalData StepFunctionData(int n, std::uint64_t seed, int dim = 3) {
  Rng rng(seed);
  CausalData d;
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(dim);
    for (auto& v : row) v = UniformUnit(rng);
    const int p = Bernoulli(rng, 0.5) ? 1 : 0;
    const double tau = row[0] > 0.5 ? 0.4 : 0.0;
    d.x.AppendRow(row);
    d.y.push_back(0.2 + 0.1 * row[1] + p * tau);
    d.p.push_back(p);
  }
  return d;
}

double StepRmse(const CausalForest& forest, int dim = 3) {
  double sse = 0.0;
  int n = 0;
  std::vector<double> x(dim, 0.5);
  for (int i = 0; i < 50; ++i) {
    for (int j = 0; j < 20; ++j) {
      x[0] = (i + 0.5) / 50.0;
      x[1] = (j + 0.5) / 20.0;
      const double truth = x[0] > 0.5 ? 0.4 : 0.0;
      const double err = forest.Predict(x) - truth;
      sse += err * err;
      ++n;
    }
  }
  return std::sqrt(sse / n);
}

ForestConfig ExhaustiveStump() {
  ForestConfig c;
  c.n_trees = 1;
  c.max_depth = 1;
  c.honest = false;
  c.subsample_fraction = 1.0;
  c.max_thresholds = 0;
  c.min_leaf_per_arm = 3;
  return c;
}

TEST(DifferenceOfMeansTest, TreatedMinusControl) {
  const std::vector<double> y{0.8, 0.8, 0.3, 0.3, 0.3};
  const std::vector<int> p{1, 1, 0, 0, 0};
  EXPECT_DOUBLE_EQ(DifferenceOfMeans(y, p), 0.5);
  EXPECT_THROW(DifferenceOfMeans(y, std::vector<int>(5, 1)), FitError);
}

TEST(CausalForestTest, DepthZeroEqualsDifferenceOfArmMeans) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    Matrix x;
    std::vector<double> y;
    std::vector<int> p;
    for (int i = 0; i < 40 + 10 * static_cast<int>(seed); ++i) {
      x.AppendRow(std::vector<double>{UniformUnit(rng), UniformUnit(rng)});
      y.push_back(UniformReal(rng, -2.0, 3.0));
      p.push_back(i % 3 == 0 ? 1 : 0);
    }
    ForestConfig c;
    c.max_depth = 0;
    c.honest = false;
    c.subsample_fraction = 1.0;
    c.n_trees = 10;
    const auto forest = CausalForest::Fit(x, y, p, c);
    const double expected = DifferenceOfMeans(y, p);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      EXPECT_NEAR(forest.Predict(x.row(i)), expected, 1e-12);
    }
  }
}

TEST(CausalForestTest, DepthZeroArmMeansExample) {
  Matrix x = Matrix::FromRows({{0.1}, {0.2}, {0.3}, {0.4}});
  const std::vector<double> y{0.8, 0.8, 0.3, 0.3};
  const std::vector<int> p{1, 1, 0, 0};
  ForestConfig c;
  c.max_depth = 0;
  c.honest = false;
  c.subsample_fraction = 1.0;
  const auto forest = CausalForest::Fit(x, y, p, c);
  EXPECT_NEAR(forest.Predict(std::vector<double>{0.9}), 0.5, 1e-12);
}

// Exhaustive search over every feature and every cut between distinct
// sorted values, scoring nL nR / (nL + nR)^2 * (tauL - tauR)^2.
struct BruteSplit {
  int feature = -1;
  double lo_value = 0.0;  // Largest value routed left.
  double hi_value = 0.0;  // Smallest value routed right.
  double score = 0.0;
};

BruteSplit ExhaustiveCausalSplit(const CausalData& d, int min_per_arm) {
  BruteSplit best;
  const std::size_t n = d.y.size();
  for (std::size_t f = 0; f < d.x.cols(); ++f) {
    std::vector<double> values;
    for (std::size_t i = 0; i < n; ++i) values.push_back(d.x(i, f));
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    for (std::size_t c = 0; c + 1 < values.size(); ++c) {
      double sum[2][2] = {{0, 0}, {0, 0}};
      int cnt[2][2] = {{0, 0}, {0, 0}};
      for (std::size_t i = 0; i < n; ++i) {
        const int side = d.x(i, f) <= values[c] ? 0 : 1;
        sum[side][d.p[i]] += d.y[i];
        ++cnt[side][d.p[i]];
      }
      if (std::min({cnt[0][0], cnt[0][1], cnt[1][0], cnt[1][1]}) < min_per_arm) continue;
      const double tl = sum[0][1] / cnt[0][1] - sum[0][0] / cnt[0][0];
      const double tr = sum[1][1] / cnt[1][1] - sum[1][0] / cnt[1][0];
      const double nl = cnt[0][0] + cnt[0][1], nr = cnt[1][0] + cnt[1][1];
      const double score = nl * nr / ((nl + nr) * (nl + nr)) * (tl - tr) * (tl - tr);
      if (score > best.score) best = {static_cast<int>(f), values[c], values[c + 1], score};
    }
  }
  return best;
}

TEST(CausalForestTest, DepthOneStumpMatchesExhaustiveSearch) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    // Two regions along feature 1 with effects 0.1 and 0.6; noisy outcomes.
    Rng rng(seed);
    CausalData d;
    for (int i = 0; i < 120; ++i) {
      std::vector<double> row{UniformUnit(rng), UniformUnit(rng), UniformUnit(rng)};
      const int p = i % 2;
      const double tau = row[1] > 0.4 ? 0.6 : 0.1;
      d.x.AppendRow(row);
      d.y.push_back(0.3 * row[2] + p * tau + 0.05 * StandardNormal(rng));
      d.p.push_back(p);
    }
    ForestConfig c = ExhaustiveStump();
    c.n_candidate_features = 3;
    const auto forest = CausalForest::Fit(d.x, d.y, d.p, c);
    const BruteSplit oracle = ExhaustiveCausalSplit(d, c.min_leaf_per_arm);
    const TreeNode& root = forest.trees()[0].nodes()[0];
    ASSERT_FALSE(root.is_leaf());
    EXPECT_EQ(root.feature_index, oracle.feature);
    EXPECT_EQ(oracle.feature, 1);
    EXPECT_GE(root.threshold, oracle.lo_value);
    EXPECT_LT(root.threshold, oracle.hi_value);
    // Leaf values reproduce the per-region difference of means.
    for (const double v : {oracle.lo_value, oracle.hi_value}) {
      std::vector<double> probe{0.5, v, 0.5};
      std::vector<double> ys;
      std::vector<int> ps;
      for (std::size_t i = 0; i < d.y.size(); ++i) {
        if ((d.x(i, 1) <= oracle.lo_value) == (v <= oracle.lo_value)) {
          ys.push_back(d.y[i]);
          ps.push_back(d.p[i]);
        }
      }
      EXPECT_NEAR(forest.Predict(probe), DifferenceOfMeans(ys, ps), 1e-12);
    }
  }
}

TEST(CausalForestTest, RecoversStepFunctionEffect) {
  const CausalData d = StepFunctionData(2000, 17);
  ForestConfig c;
  c.seed = 3;
  const auto forest = CausalForest::Fit(d.x, d.y, d.p, c);
  EXPECT_LT(StepRmse(forest), 0.05);
}

TEST(CausalForestTest, ZeroEffectPredictsZero) {
  Rng rng(1);
  Matrix x;
  std::vector<double> y;
  std::vector<int> p;
  for (int i = 0; i < 200; ++i) {
    x.AppendRow(std::vector<double>{UniformUnit(rng), UniformUnit(rng)});
    y.push_back(0.25);
    p.push_back(i % 2);
  }
  const auto forest = CausalForest::Fit(x, y, p, ForestConfig{});
  for (int i = 0; i < 20; ++i) {
    EXPECT_EQ(forest.Predict(std::vector<double>{i / 20.0, 0.3}), 0.0);
  }
}

TEST(CausalForestTest, MissingArmIsFitError) {
  Matrix x = Matrix::FromRows({{0.0}, {1.0}});
  EXPECT_THROW(CausalForest::Fit(x, std::vector<double>{1, 2}, std::vector<int>{1, 1}, {}),
               FitError);
  EXPECT_THROW(CausalForest::Fit(x, std::vector<double>{1, 2}, std::vector<int>{0, 2}, {}),
               ValidationError);
  EXPECT_THROW(CausalForest::Fit(x, std::vector<double>{1}, std::vector<int>{0, 1}, {}),
               ValidationError);
}

TEST(CausalForestTest, PredictDimensionMismatch) {
  const CausalData d = StepFunctionData(100, 2);
  const auto forest = CausalForest::Fit(d.x, d.y, d.p, ForestConfig{});
  EXPECT_THROW(forest.Predict(std::vector<double>{0.5}), ValidationError);
}

nlohmann::json Leaf(double value, int treated, int control) {
  return nlohmann::json::array({-1, 0.0, -1, -1, value, treated + control, treated, control,
                                treated, control, 0.0});
}

TEST(CausalForestTest, AveragesLeavesWithBothArms) {
  nlohmann::json j = {{"format", "cfltr-forest"}, {"version", 1}, {"kind", "causal"},
                      {"n_features", 1},          {"global_tau", 0.9}};
  j["trees"] = nlohmann::json::array({nlohmann::json::array({Leaf(0.2, 3, 3)}),
                                      nlohmann::json::array({Leaf(0.4, 2, 5)}),
                                      nlohmann::json::array({Leaf(7.0, 0, 4)})});
  const auto forest = CausalForest::FromJson(j);
  EXPECT_DOUBLE_EQ(forest.Predict(std::vector<double>{0.0}), 0.3);

  j["trees"] = nlohmann::json::array({nlohmann::json::array({Leaf(7.0, 0, 4)})});
  EXPECT_DOUBLE_EQ(CausalForest::FromJson(j).Predict(std::vector<double>{0.0}), 0.9);
}

TEST(CausalForestTest, SingleLeafForestIsConstant) {
  const CausalData d = StepFunctionData(60, 4);
  ForestConfig c;
  c.n_trees = 1;
  c.max_depth = 0;
  const auto forest = CausalForest::Fit(d.x, d.y, d.p, c);
  const auto preds = forest.Predict(d.x);
  for (const double v : preds) EXPECT_EQ(v, preds.front());
}

// Walks every tree by hand and averages qualifying leaves.
double ManualCausalPredict(const CausalForest& forest, std::span<const double> x) {
  double sum = 0.0;
  int used = 0;
  for (const auto& tree : forest.trees()) {
    const auto& nodes = tree.nodes();
    int i = 0;
    while (nodes[i].feature_index >= 0) {
      i = x[nodes[i].feature_index] <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
    }
    if (nodes[i].n_treated > 0 && nodes[i].n_control > 0) {
      sum += nodes[i].value;
      ++used;
    }
  }
  return used ? sum / used : forest.global_tau();
}

TEST(CausalForestTest, AgreesWithManualTreeWalk) {
  const CausalData d = StepFunctionData(500, 8);
  const auto forest = CausalForest::Fit(d.x, d.y, d.p, ForestConfig{});
  Rng rng(99);
  for (int i = 0; i < 10; ++i) {
    std::vector<double> x{UniformUnit(rng), UniformUnit(rng), UniformUnit(rng)};
    EXPECT_DOUBLE_EQ(forest.Predict(x), ManualCausalPredict(forest, x));
  }
}

TEST(CausalForestTest, BuildHalfLeavesRespectMinimumPerArm) {
  const CausalData d = StepFunctionData(800, 12);
  ForestConfig c;
  c.n_trees = 20;
  c.min_leaf_per_arm = 7;
  const auto forest = CausalForest::Fit(d.x, d.y, d.p, c);
  for (const auto& tree : forest.trees()) {
    const auto& nodes = tree.nodes();
    if (nodes.size() == 1) continue;
    for (const auto& node : nodes) {
      if (!node.is_leaf()) continue;
      EXPECT_GE(node.build_treated, c.min_leaf_per_arm);
      EXPECT_GE(node.build_control, c.min_leaf_per_arm);
    }
  }
}

TEST(CausalForestTest, DeterministicAndThreadCountInvariant) {
  const CausalData d = StepFunctionData(400, 5);
  ForestConfig c;
  c.seed = 77;
  const auto a = CausalForest::Fit(d.x, d.y, d.p, c);
  c.n_threads = 4;
  const auto b = CausalForest::Fit(d.x, d.y, d.p, c);
  EXPECT_EQ(a.ToJson().dump(), b.ToJson().dump());
  EXPECT_EQ(a.Predict(d.x), b.Predict(d.x));
}

TEST(CausalForestTest, JsonRoundTrip) {
  const CausalData d = StepFunctionData(300, 6);
  const auto forest = CausalForest::Fit(d.x, d.y, d.p, ForestConfig{});
  const auto back = CausalForest::FromJson(nlohmann::json::parse(forest.ToJson().dump()));
  EXPECT_EQ(forest.Predict(d.x), back.Predict(d.x));
  EXPECT_THROW(RegressionForest::FromJson(forest.ToJson()), ValidationError);
}

TEST(CausalForestTest, MedianErrorShrinksWithSampleSize) {
  double previous = 1.0;
  for (const int n : {250, 500, 1000, 2000, 4000}) {
    std::vector<double> rmses;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const CausalData d = StepFunctionData(n, 1000 + seed);
      ForestConfig c;
      c.n_trees = 50;
      c.seed = seed;
      rmses.push_back(StepRmse(CausalForest::Fit(d.x, d.y, d.p, c)));
    }
    std::nth_element(rmses.begin(), rmses.begin() + 2, rmses.end());
    EXPECT_LE(rmses[2], previous) << "n = " << n;
    previous = rmses[2];
  }
}

TEST(RegressionForestTest, ConstantTarget) {
  Rng rng(1);
  Matrix x;
  for (int i = 0; i < 50; ++i) x.AppendRow(std::vector<double>{UniformUnit(rng)});
  const auto forest = RegressionForest::Fit(x, std::vector<double>(50, 3.0), ForestConfig{});
  EXPECT_DOUBLE_EQ(forest.Predict(std::vector<double>{0.7}), 3.0);
  for (const double v : forest.FeatureImportance()) EXPECT_EQ(v, 0.0);
}

TEST(RegressionForestTest, SingleSample) {
  Matrix x = Matrix::FromRows({{0.3, 0.4}});
  const auto forest = RegressionForest::Fit(x, std::vector<double>{-1.5}, ForestConfig{});
  EXPECT_DOUBLE_EQ(forest.Predict(std::vector<double>{0.9, 0.1}), -1.5);
}

TEST(RegressionForestTest, LearnsIdentityOnGrid) {
  Matrix x;
  std::vector<double> y;
  for (int i = 0; i < 400; ++i) {
    const double v = (i + 0.5) / 400.0;
    x.AppendRow(std::vector<double>{v});
    y.push_back(v);
  }
  ForestConfig c = ForestConfig::RegressionDefaults();
  c.max_depth = 6;
  const auto forest = RegressionForest::Fit(x, y, c);
  double mae = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double v = (i + 0.25) / 100.0;
    mae += std::fabs(forest.Predict(std::vector<double>{v}) - v);
  }
  EXPECT_LT(mae / 100.0, 0.1);
}

TEST(RegressionForestTest, LeafValuesAreMeansOfRoutedTargets) {
  Rng rng(3);
  Matrix x;
  std::vector<double> y;
  for (int i = 0; i < 60; ++i) {
    x.AppendRow(std::vector<double>{UniformUnit(rng), UniformUnit(rng)});
    y.push_back(UniformReal(rng, 0.0, 10.0));
  }
  ForestConfig c;
  c.n_trees = 1;
  c.subsample_fraction = 1.0;
  c.max_depth = 3;
  c.min_leaf = 4;
  const auto forest = RegressionForest::Fit(x, y, c);
  const DecisionTree& tree = forest.trees()[0];
  std::vector<double> sum(tree.nodes().size(), 0.0);
  std::vector<int> count(tree.nodes().size(), 0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const int leaf = tree.LeafIndex(x.row(i));
    sum[leaf] += y[i];
    ++count[leaf];
  }
  for (std::size_t n = 0; n < tree.nodes().size(); ++n) {
    if (!tree.nodes()[n].is_leaf()) continue;
    ASSERT_GT(count[n], 0);
    EXPECT_NEAR(tree.nodes()[n].value, sum[n] / count[n], 1e-12);
    EXPECT_GE(count[n], c.min_leaf);
  }
}

TEST(RegressionForestTest, SingleSplitConcentratesImportance) {
  Matrix x;
  std::vector<double> y;
  Rng rng(8);
  for (int i = 0; i < 40; ++i) {
    std::vector<double> row(5);
    for (auto& v : row) v = UniformUnit(rng);
    x.AppendRow(row);
    y.push_back(row[3] > 0.5 ? 1.0 : 0.0);
  }
  ForestConfig c;
  c.n_trees = 1;
  c.max_depth = 1;
  c.subsample_fraction = 1.0;
  c.n_candidate_features = 5;
  const auto importance = RegressionForest::Fit(x, y, c).FeatureImportance();
  EXPECT_DOUBLE_EQ(importance[3], 1.0);
  EXPECT_DOUBLE_EQ(std::accumulate(importance.begin(), importance.end(), 0.0), 1.0);
}

TEST(RegressionForestTest, ImportanceFindsRelevantFeatures) {
  Rng rng(10);
  Matrix x;
  std::vector<double> y;
  for (int i = 0; i < 200; ++i) {
    std::vector<double> row(6);
    for (auto& v : row) v = UniformUnit(rng);
    x.AppendRow(row);
    y.push_back(2.0 * row[0] + (row[1] > 0.5 ? 1.0 : 0.0));
  }
  const auto importance =
      RegressionForest::Fit(x, y, ForestConfig::ImportanceDefaults()).FeatureImportance();
  EXPECT_GE(importance[0] + importance[1], 0.8);
}

TEST(RegressionForestTest, DimensionChecks) {
  Matrix x = Matrix::FromRows({{0.0, 1.0}});
  EXPECT_THROW(RegressionForest::Fit(x, std::vector<double>{1.0, 2.0}, ForestConfig{}),
               ValidationError);
  const auto forest = RegressionForest::Fit(x, std::vector<double>{1.0}, ForestConfig{});
  EXPECT_THROW(forest.Predict(std::vector<double>{1.0}), ValidationError);
}

TEST(ForestConfigTest, Validation) {
  ForestConfig c;
  c.n_trees = 0;
  EXPECT_THROW(c.Validate(), ValidationError);
  c = {};
  c.subsample_fraction = 0.0;
  EXPECT_THROW(c.Validate(), ValidationError);
  c = {};
  c.min_leaf = 0;
  EXPECT_THROW(c.Validate(), ValidationError);
}

TEST(CandidateCutsTest, DistinctNeighboursAndThinning) {
  const std::vector<double> v{1, 1, 2, 3, 3, 4};
  EXPECT_EQ(CandidateCuts(v, 0), (std::vector<std::size_t>{2, 3, 5}));
  EXPECT_EQ(CandidateCuts(v, 1).size(), 1u);
  std::vector<double> many(1000);
  std::iota(many.begin(), many.end(), 0.0);
  const auto cuts = CandidateCuts(many, 64);
  EXPECT_EQ(cuts.size(), 64u);
  EXPECT_TRUE(std::is_sorted(cuts.begin(), cuts.end()));
}

TEST(CutThresholdTest, RoutesNeighboursApart) {
  const double a = 1.0, b = std::nextafter(1.0, 2.0);
  const double t = CutThreshold(a, b);
  EXPECT_LE(a, t);
  EXPECT_GT(b, t);
  EXPECT_DOUBLE_EQ(CutThreshold(0.0, 1.0), 0.5);
}

}  // namespace
}  // namespace cfltr
