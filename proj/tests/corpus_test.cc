#include "cfltr/corpus.h"

#include <algorithm>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "cfltr/errors.h"
#include "test_util.h"

namespace cfltr {
namespace {

using ::cfltr::testing::MakeDoc;

std::vector<QueryGroup> Parse(const std::string& text, int dim = 0) {
  std::istringstream in(text);
  return ParseLetor(in, dim);
}

TEST(ParseLetorTest, SingleLinePadsMissingFeatures) {
  const auto groups = Parse("3 qid:7 1:0.5 3:1.0");
  ASSERT_EQ(groups.size(), 1u);
  EXPECT_EQ(groups[0].query_id, "7");
  ASSERT_EQ(groups[0].documents.size(), 1u);
  const Document& d = groups[0].documents[0];
  EXPECT_EQ(d.grade, 3);
  EXPECT_EQ(d.binary_rel, 1);
  EXPECT_EQ(d.features, (std::vector<double>{0.5, 0.0, 1.0}));
}

TEST(ParseLetorTest, PadsToRequestedDimension) {
  const auto groups = Parse("3 qid:7 1:0.5 3:1.0", 5);
  EXPECT_EQ(groups[0].documents[0].features,
            (std::vector<double>{0.5, 0.0, 1.0, 0.0, 0.0}));
}

TEST(ParseLetorTest, GroupsByQidInFirstAppearanceOrder) {
  const auto groups = Parse("0 qid:1 1:0.0\n4 qid:1 1:1.0\n2 qid:0 1:0.3 # note\n1 qid:1 1:2");
  ASSERT_EQ(groups.size(), 2u);
  EXPECT_EQ(groups[0].query_id, "1");
  EXPECT_EQ(groups[1].query_id, "0");
  ASSERT_EQ(groups[0].documents.size(), 3u);
  EXPECT_EQ(groups[0].documents[0].grade, 0);
  EXPECT_EQ(groups[0].documents[1].grade, 4);
  EXPECT_EQ(groups[0].documents[2].doc_index, 2);
  EXPECT_EQ(groups[1].documents[0].doc_index, 0);
}

TEST(ParseLetorTest, IgnoresCommentsAndBlankLines) {
  const auto groups = Parse("# header\n\n1 qid:a 2:7 # docid = 3\n");
  ASSERT_EQ(groups.size(), 1u);
  EXPECT_EQ(groups[0].documents[0].features, (std::vector<double>{0.0, 7.0}));
}

TEST(ParseLetorTest, NonNumericValueReportsLine) {
  try {
    Parse("1 qid:1 1:0.5\n1 qid:1 2:abc");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(ParseLetorTest, MalformedLines) {
  EXPECT_THROW(Parse("qid:1 1:0.5"), ParseError);
  EXPECT_THROW(Parse("1 1:0.5"), ParseError);
  EXPECT_THROW(Parse("1 qid:1 2:0.5 1:0.2"), ParseError);
  EXPECT_THROW(Parse("1 qid:1 0:0.5"), ParseError);
  EXPECT_THROW(Parse("x qid:1 1:0.5"), ParseError);
}

TEST(ParseLetorTest, GradeOutsideRangeIsValidationError) {
  EXPECT_THROW(Parse("5 qid:1 1:0.5"), ValidationError);
  EXPECT_THROW(Parse("-1 qid:1 1:0.5"), ValidationError);
}

TEST(ParseLetorTest, RoundTripsThroughWriter) {
  Rng rng(11);
  std::vector<QueryGroup> groups(3);
  for (int q = 0; q < 3; ++q) {
    groups[q].query_id = "q" + std::to_string(q);
    for (int i = 0; i < 4; ++i) {
      groups[q].documents.push_back(
          MakeDoc(i, testing::RandomVector(rng, 6, -5.0, 5.0), (q + i) % 5));
    }
  }
  std::ostringstream out;
  WriteLetor(out, groups);
  const auto parsed = Parse(out.str());
  ASSERT_EQ(parsed.size(), groups.size());
  for (std::size_t q = 0; q < groups.size(); ++q) {
    EXPECT_EQ(parsed[q].query_id, groups[q].query_id);
    for (std::size_t i = 0; i < groups[q].documents.size(); ++i) {
      EXPECT_EQ(parsed[q].documents[i].grade, groups[q].documents[i].grade);
      EXPECT_EQ(parsed[q].documents[i].features, groups[q].documents[i].features);
    }
  }
}

TEST(BinarizeGradeTest, ThreeAndFourAreRelevant) {
  EXPECT_EQ(BinarizeGrade(0), 0);
  EXPECT_EQ(BinarizeGrade(2), 0);
  EXPECT_EQ(BinarizeGrade(3), 1);
  EXPECT_EQ(BinarizeGrade(4), 1);
}

CorpusSplit OneFeatureSplit(std::vector<double> train, std::vector<double> test) {
  CorpusSplit s;
  s.feature_dim = 1;
  QueryGroup tr, te;
  tr.query_id = "train";
  te.query_id = "test";
  for (std::size_t i = 0; i < train.size(); ++i) {
    tr.documents.push_back(MakeDoc(static_cast<int>(i), {train[i]}, 0));
  }
  for (std::size_t i = 0; i < test.size(); ++i) {
    te.documents.push_back(MakeDoc(static_cast<int>(i), {test[i]}, 0));
  }
  s.train.push_back(tr);
  s.test.push_back(te);
  return s;
}

TEST(NormalizeFeaturesTest, MinMaxOnTrain) {
  const auto s = NormalizeFeatures(OneFeatureSplit({0, 5, 10}, {20, -3, 2.5}));
  EXPECT_DOUBLE_EQ(s.train[0].documents[0].features[0], 0.0);
  EXPECT_DOUBLE_EQ(s.train[0].documents[1].features[0], 0.5);
  EXPECT_DOUBLE_EQ(s.train[0].documents[2].features[0], 1.0);
  EXPECT_DOUBLE_EQ(s.test[0].documents[0].features[0], 1.0);
  EXPECT_DOUBLE_EQ(s.test[0].documents[1].features[0], 0.0);
  EXPECT_DOUBLE_EQ(s.test[0].documents[2].features[0], 0.25);
}

TEST(NormalizeFeaturesTest, ConstantFeatureMapsToZero) {
  const auto s = NormalizeFeatures(OneFeatureSplit({3, 3, 3}, {3, 7}));
  for (const auto& d : s.train[0].documents) EXPECT_EQ(d.features[0], 0.0);
  for (const auto& d : s.test[0].documents) EXPECT_EQ(d.features[0], 0.0);
}

TEST(NormalizeFeaturesTest, IsIdempotentOnTrain) {
  const auto once = NormalizeFeatures(GenerateSyntheticCorpus(20, 5, 4, 3));
  const auto twice = NormalizeFeatures(once);
  for (std::size_t q = 0; q < once.train.size(); ++q) {
    for (std::size_t i = 0; i < once.train[q].documents.size(); ++i) {
      const auto& a = once.train[q].documents[i].features;
      const auto& b = twice.train[q].documents[i].features;
      for (std::size_t j = 0; j < a.size(); ++j) EXPECT_NEAR(a[j], b[j], 1e-12);
    }
  }
}

TEST(SyntheticCorpusTest, SplitArithmetic) {
  const auto s = GenerateSyntheticCorpus(10, 10, 3, 1);
  EXPECT_EQ(s.train.size(), 6u);
  EXPECT_EQ(s.validation.size(), 2u);
  EXPECT_EQ(s.test.size(), 2u);
  EXPECT_NO_THROW(s.Validate());
}

TEST(SyntheticCorpusTest, DeterministicBytes) {
  std::ostringstream a, b;
  SaveCorpusCache(a, GenerateSyntheticCorpus(30, 8, 5, 77));
  SaveCorpusCache(b, GenerateSyntheticCorpus(30, 8, 5, 77));
  EXPECT_EQ(a.str(), b.str());
}

TEST(SyntheticCorpusTest, ThirtyPercentRelevantAndFeaturesInUnitInterval) {
  const auto s = GenerateSyntheticCorpus(100, 10, 6, 5);
  int relevant = 0, total = 0;
  for (const auto* split : {&s.train, &s.validation, &s.test}) {
    for (const auto& g : *split) {
      for (const auto& d : g.documents) {
        relevant += d.binary_rel;
        ++total;
        EXPECT_EQ(d.binary_rel, BinarizeGrade(d.grade));
        for (const double v : d.features) {
          EXPECT_GE(v, 0.0);
          EXPECT_LT(v, 1.0);
        }
      }
    }
  }
  EXPECT_NEAR(static_cast<double>(relevant) / total, 0.30, 0.01);
}

TEST(SyntheticCorpusTest, ScalarFeaturesStillSpanAllGrades) {
  const auto s = GenerateSyntheticCorpus(100, 10, 1, 9);
  int histogram[5] = {0, 0, 0, 0, 0};
  for (const auto* split : {&s.train, &s.validation, &s.test}) {
    for (const auto& g : *split) {
      for (const auto& d : g.documents) {
        ASSERT_EQ(d.features.size(), 1u);
        ++histogram[d.grade];
      }
    }
  }
  // Quantile thresholds give 400/150/150/200/100 of 1000 documents.
  EXPECT_EQ(histogram[0], 400);
  EXPECT_EQ(histogram[1], 150);
  EXPECT_EQ(histogram[2], 150);
  EXPECT_EQ(histogram[3], 200);
  EXPECT_EQ(histogram[4], 100);
}

TEST(SyntheticCorpusTest, RejectsBadSizes) {
  EXPECT_THROW(GenerateSyntheticCorpus(0, 5, 3, 1), ValidationError);
  SyntheticCorpusOptions options;
  options.n_informative = 4;
  EXPECT_THROW(GenerateSyntheticCorpus(5, 5, 3, 1, options), ValidationError);
}

TEST(SubsampleQueriesTest, FractionOneIsIdentity) {
  const auto s = GenerateSyntheticCorpus(50, 2, 2, 1);
  const auto sample = SubsampleQueries(s.train, 1.0, 4);
  ASSERT_EQ(sample.size(), s.train.size());
  for (std::size_t i = 0; i < sample.size(); ++i) {
    EXPECT_EQ(sample[i].query_id, s.train[i].query_id);
  }
}

TEST(SubsampleQueriesTest, RoundingAndMinimumOne) {
  std::vector<QueryGroup> groups(200);
  for (int i = 0; i < 200; ++i) {
    groups[i].query_id = std::to_string(i);
    groups[i].documents.push_back(MakeDoc(0, {0.0}, 0));
  }
  EXPECT_EQ(SubsampleQueries(groups, 0.01, 1).size(), 2u);
  EXPECT_EQ(SubsampleQueries(groups, 0.001, 1).size(), 1u);
  const auto a = SubsampleQueries(groups, 0.1, 8);
  const auto b = SubsampleQueries(groups, 0.1, 8);
  ASSERT_EQ(a.size(), 20u);
  std::set<std::string> ids;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].query_id, b[i].query_id);
    ids.insert(a[i].query_id);
    EXPECT_EQ(a[i].documents.size(), 1u);
  }
  EXPECT_EQ(ids.size(), 20u);
}

TEST(SubsampleQueriesTest, Errors) {
  EXPECT_THROW(SubsampleQueries({}, 0.5, 1), ValidationError);
  std::vector<QueryGroup> one(1);
  EXPECT_THROW(SubsampleQueries(one, 0.0, 1), ValidationError);
  EXPECT_THROW(SubsampleQueries(one, 1.5, 1), ValidationError);
}

// Train split where relevance is 1[f0 > 0.5] and the other features are noise.
std::vector<QueryGroup> ThresholdCorpus(int n_features, int copy_of_zero, Rng& rng) {
  std::vector<QueryGroup> groups(20);
  for (int q = 0; q < 20; ++q) {
    groups[q].query_id = "q" + std::to_string(q);
    for (int i = 0; i < 20; ++i) {
      auto f = testing::RandomVector(rng, n_features);
      if (copy_of_zero >= 0) f[copy_of_zero] = f[0];
      groups[q].documents.push_back(MakeDoc(i, f, f[0] > 0.5 ? 4 : 0));
    }
  }
  return groups;
}

// Best accuracy of any single-feature threshold rule, by exhaustive search.
double BestStumpAccuracy(const std::vector<QueryGroup>& groups, int feature) {
  std::vector<std::pair<double, int>> pts;
  for (const auto& g : groups) {
    for (const auto& d : g.documents) pts.emplace_back(d.features[feature], d.binary_rel);
  }
  std::sort(pts.begin(), pts.end());
  double best = 0.0;
  for (std::size_t cut = 0; cut <= pts.size(); ++cut) {
    int correct = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) correct += (i >= cut) == (pts[i].second == 1);
    best = std::max({best, static_cast<double>(correct) / pts.size(),
                     1.0 - static_cast<double>(correct) / pts.size()});
  }
  return best;
}

TEST(SelectContextFeaturesTest, FindsTheInformativeFeature) {
  Rng rng(21);
  const auto train = ThresholdCorpus(6, -1, rng);
  int oracle = 0;
  for (int f = 1; f < 6; ++f) {
    if (BestStumpAccuracy(train, f) > BestStumpAccuracy(train, oracle)) oracle = f;
  }
  ASSERT_EQ(oracle, 0);
  EXPECT_EQ(SelectContextFeatures(train, {}, 1, 3), (std::vector<int>{oracle}));
}

TEST(SelectContextFeaturesTest, AllFeaturesSortedWhenNEqualsDim) {
  Rng rng(2);
  const auto train = ThresholdCorpus(5, -1, rng);
  EXPECT_EQ(SelectContextFeatures(train, {}, 5, 3), (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_THROW(SelectContextFeatures(train, {}, 6, 3), ValidationError);
  EXPECT_THROW(SelectContextFeatures(train, {}, 0, 3), ValidationError);
}

TEST(SelectContextFeaturesTest, DuplicateInformativeFeatureTieGoesToLowerIndex) {
  Rng rng(4);
  // Features 2 and 5 both copy feature 0; drop feature 0 itself by making it
  // constant so that only the copies carry signal.
  auto train = ThresholdCorpus(6, 2, rng);
  for (auto& g : train) {
    for (auto& d : g.documents) {
      d.features[5] = d.features[2];
      d.features[0] = 0.0;
    }
  }
  ForestConfig config = ForestConfig::ImportanceDefaults();
  config.n_candidate_features = 6;
  // With every feature examined at every node, equal gains resolve to the
  // first feature scanned, so the copy at index 2 receives all importance.
  EXPECT_EQ(SelectContextFeatures(train, {}, 1, 3, config), (std::vector<int>{2}));
  // With random candidate subsets either copy may win.
  const auto chosen = SelectContextFeatures(train, {}, 1, 3);
  EXPECT_TRUE(chosen[0] == 2 || chosen[0] == 5);
}

TEST(CorpusSplitTest, ValidateDetectsOverlapAndBadIndices) {
  CorpusSplit s = GenerateSyntheticCorpus(10, 2, 3, 1);
  s.context_feature_indices = {0, 2};
  EXPECT_NO_THROW(s.Validate());
  s.context_feature_indices = {0, 0};
  EXPECT_THROW(s.Validate(), ValidationError);
  s.context_feature_indices = {3};
  EXPECT_THROW(s.Validate(), ValidationError);
  s.context_feature_indices = {};
  s.test.push_back(s.train.front());
  EXPECT_THROW(s.Validate(), ValidationError);
}

TEST(CorpusCacheTest, RoundTrip) {
  CorpusSplit s = GenerateSyntheticCorpus(10, 3, 4, 2);
  s.context_feature_indices = {1, 3};
  std::stringstream buf;
  SaveCorpusCache(buf, s);
  const CorpusSplit back = LoadCorpusCache(buf);
  EXPECT_EQ(back.feature_dim, 4);
  EXPECT_EQ(back.context_feature_indices, s.context_feature_indices);
  ASSERT_EQ(back.test.size(), s.test.size());
  EXPECT_EQ(back.test[0].documents[2].features, s.test[0].documents[2].features);
  EXPECT_EQ(back.train[1].documents[0].grade, s.train[1].documents[0].grade);
}

TEST(CorpusCacheTest, RejectsForeignHeader) {
  std::istringstream in("not a cache\n");
  EXPECT_THROW(LoadCorpusCache(in), Error);
}

TEST(SplitCorpusTest, DisjointAndComplete) {
  std::vector<QueryGroup> groups(25);
  for (int i = 0; i < 25; ++i) {
    groups[i].query_id = "g" + std::to_string(i);
    groups[i].documents.push_back(MakeDoc(0, {0.0}, 0));
  }
  const auto s = SplitCorpus(groups, 1, 3);
  EXPECT_EQ(s.train.size() + s.validation.size() + s.test.size(), 25u);
  EXPECT_NO_THROW(s.Validate());
  EXPECT_EQ(TrainAndValidation(s).size(), s.train.size() + s.validation.size());
}

}  // namespace
}  // namespace cfltr
