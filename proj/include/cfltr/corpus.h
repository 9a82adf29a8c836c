#ifndef CFLTR_CORPUS_H_
#define CFLTR_CORPUS_H_

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "cfltr/forest.h"

namespace cfltr {

struct Document {
  int doc_index = 0;  // Position within the query group in file order.
  std::vector<double> features;
  int grade = 0;       // Graded relevance in {0..4}.
  int binary_rel = 0;  // 1 iff grade is 3 or 4.
};

int BinarizeGrade(int grade);

struct QueryGroup {
  std::string query_id;
  std::vector<Document> documents;
};

struct CorpusSplit {
  std::vector<QueryGroup> train;
  std::vector<QueryGroup> validation;
  std::vector<QueryGroup> test;
  int feature_dim = 0;
  std::vector<int> context_feature_indices;

  // Throws ValidationError when splits overlap by query id or the context
  // indices are duplicated or out of range.
  void Validate() const;
};

// Parses LETOR / SVMLight-rank text: `<grade> qid:<id> <fidx>:<val> ... [# c]`.
// Feature indices are 1-based and strictly increasing per line; absent
// indices read as 0.0. Groups keep first-appearance order of their qid.
// `feature_dim` = 0 sizes vectors to the largest index seen in the stream.
std::vector<QueryGroup> ParseLetor(std::istream& in, int feature_dim = 0);
std::vector<QueryGroup> ParseLetorFile(const std::string& path, int feature_dim = 0);

// Writes groups back in LETOR form with every feature listed and values
// printed with round-trip precision.
void WriteLetor(std::ostream& out, const std::vector<QueryGroup>& groups);

// Shuffles groups with `seed` and splits them 60/20/20.
CorpusSplit SplitCorpus(std::vector<QueryGroup> groups, int feature_dim,
                        std::uint64_t seed);

// Min-max scaling fitted on the train split; other splits are clamped to
// [0, 1] and constant features map to 0.
CorpusSplit NormalizeFeatures(CorpusSplit splits);

// Ranks features by impurity-decrease importance of a forest classifying
// binary relevance over train + validation documents. Returns the top `n`
// indices (ties toward the lower index) in ascending order.
std::vector<int> SelectContextFeatures(const std::vector<QueryGroup>& train,
                                       const std::vector<QueryGroup>& validation,
                                       int n, std::uint64_t seed,
                                       ForestConfig config = ForestConfig::ImportanceDefaults());

// Uniform sample of max(1, round(fraction * |groups|)) groups without
// replacement, returned in their original order.
std::vector<QueryGroup> SubsampleQueries(const std::vector<QueryGroup>& groups,
                                         double fraction, std::uint64_t seed);

struct SyntheticCorpusOptions {
  // Standard deviation of per-document noise added to the latent linear
  // score, relative to the standard deviation of the noiseless score.
  double label_noise = 0.5;
  // Number of features with a non-zero score weight, chosen at random;
  // 0 makes every feature informative.
  int n_informative = 0;
};

// Uniform [0,1) features; grades from quantile thresholds of a seeded random
// linear score (40/15/15/20/10 percent for grades 0..4, so 30% are relevant);
// split 60/20/20 in generation order.
CorpusSplit GenerateSyntheticCorpus(int n_queries, int docs_per_query,
                                    int feature_dim, std::uint64_t seed,
                                    const SyntheticCorpusOptions& options = {});

// Concatenation of train and validation.
std::vector<QueryGroup> TrainAndValidation(const CorpusSplit& splits);

// Versioned text cache of a full split.
void SaveCorpusCache(std::ostream& out, const CorpusSplit& splits);
CorpusSplit LoadCorpusCache(std::istream& in);

}  // namespace cfltr

#endif  // CFLTR_CORPUS_H_
