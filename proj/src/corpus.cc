#include "cfltr/corpus.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string_view>
#include <unordered_map>
#include <unordered_set>

#include "cfltr/errors.h"
#include "cfltr/random.h"

namespace cfltr {
namespace {

constexpr std::string_view kCacheHeader = "cfltr-corpus-cache v1";

std::string_view Trim(std::string_view s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string_view::npos) return {};
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string_view> SplitWhitespace(std::string_view s) {
  std::vector<std::string_view> tokens;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
    if (j > i) tokens.push_back(s.substr(i, j - i));
    i = j;
  }
  return tokens;
}

template <typename T>
bool ParseNumber(std::string_view token, T* out) {
  if (token.empty()) return false;
  const char* first = token.data();
  const char* last = token.data() + token.size();
  if (*first == '+') ++first;
  const auto result = std::from_chars(first, last, *out);
  return result.ec == std::errc() && result.ptr == last;
}

struct ParsedLine {
  int grade = 0;
  std::string qid;
  std::vector<std::pair<int, double>> features;
};

ParsedLine ParseLine(std::string_view line, std::size_t line_no) {
  const auto tokens = SplitWhitespace(line);
  if (tokens.size() < 2) throw ParseError(line_no, "expected '<grade> qid:<id> ...'");
  ParsedLine parsed;
  if (!ParseNumber(tokens[0], &parsed.grade)) {
    throw ParseError(line_no, "invalid grade '" + std::string(tokens[0]) + "'");
  }
  if (parsed.grade < 0 || parsed.grade > 4) {
    throw ValidationError("line " + std::to_string(line_no) + ": grade " +
                          std::to_string(parsed.grade) + " outside {0..4}");
  }
  if (!tokens[1].starts_with("qid:") || tokens[1].size() == 4) {
    throw ParseError(line_no, "missing qid");
  }
  parsed.qid = std::string(tokens[1].substr(4));
  int previous = 0;
  for (std::size_t t = 2; t < tokens.size(); ++t) {
    const auto colon = tokens[t].find(':');
    if (colon == std::string_view::npos) {
      throw ParseError(line_no, "feature token '" + std::string(tokens[t]) +
                                    "' lacks ':'");
    }
    int index = 0;
    double value = 0.0;
    if (!ParseNumber(tokens[t].substr(0, colon), &index) || index < 1) {
      throw ParseError(line_no, "invalid feature index in '" +
                                    std::string(tokens[t]) + "'");
    }
    if (index <= previous) {
      throw ParseError(line_no, "feature indices must be strictly increasing");
    }
    if (!ParseNumber(tokens[t].substr(colon + 1), &value)) {
      throw ParseError(line_no, "non-numeric feature value in '" +
                                    std::string(tokens[t]) + "'");
    }
    previous = index;
    parsed.features.emplace_back(index, value);
  }
  return parsed;
}

std::vector<QueryGroup> ConcatGroups(const std::vector<QueryGroup>& a,
                                     const std::vector<QueryGroup>& b) {
  std::vector<QueryGroup> out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

void SplitSizes(std::size_t n, std::size_t* n_train, std::size_t* n_val) {
  *n_train = static_cast<std::size_t>(std::llround(0.6 * static_cast<double>(n)));
  *n_val = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
  *n_train = std::min(*n_train, n);
  *n_val = std::min(*n_val, n - *n_train);
}

CorpusSplit AssembleSplit(std::vector<QueryGroup> groups, int feature_dim) {
  std::size_t n_train = 0, n_val = 0;
  SplitSizes(groups.size(), &n_train, &n_val);
  CorpusSplit s;
  s.feature_dim = feature_dim;
  auto it = std::make_move_iterator(groups.begin());
  s.train.assign(it, it + n_train);
  s.validation.assign(it + n_train, it + n_train + n_val);
  s.test.assign(it + n_train + n_val, std::make_move_iterator(groups.end()));
  return s;
}

}  // namespace

int BinarizeGrade(int grade) { return grade >= 3 ? 1 : 0; }

void CorpusSplit::Validate() const {
  std::unordered_set<std::string> seen;
  for (const auto* split : {&train, &validation, &test}) {
    for (const auto& g : *split) {
      if (!seen.insert(g.query_id).second) {
        throw ValidationError("query id '" + g.query_id + "' appears twice");
      }
      if (g.documents.empty()) {
        throw ValidationError("query '" + g.query_id + "' has no documents");
      }
    }
  }
  std::unordered_set<int> indices;
  for (const int i : context_feature_indices) {
    if (i < 0 || i >= feature_dim) {
      throw ValidationError("context feature index " + std::to_string(i) +
                            " out of range");
    }
    if (!indices.insert(i).second) {
      throw ValidationError("duplicate context feature index " + std::to_string(i));
    }
  }
}

std::vector<QueryGroup> ParseLetor(std::istream& in, int feature_dim) {
  std::vector<ParsedLine> lines;
  std::string raw;
  std::size_t line_no = 0;
  int max_index = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = Trim(line);
    if (line.empty()) continue;
    ParsedLine parsed = ParseLine(line, line_no);
    if (!parsed.features.empty()) {
      const int last = parsed.features.back().first;
      if (feature_dim > 0 && last > feature_dim) {
        throw ParseError(line_no, "feature index " + std::to_string(last) +
                                      " exceeds dimension " +
                                      std::to_string(feature_dim));
      }
      max_index = std::max(max_index, last);
    }
    lines.push_back(std::move(parsed));
  }
  const int dim = feature_dim > 0 ? feature_dim : max_index;

  std::vector<QueryGroup> groups;
  std::unordered_map<std::string, std::size_t> by_qid;
  for (auto& line : lines) {
    auto [it, inserted] = by_qid.try_emplace(line.qid, groups.size());
    if (inserted) groups.push_back(QueryGroup{line.qid, {}});
    QueryGroup& group = groups[it->second];
    Document doc;
    doc.doc_index = static_cast<int>(group.documents.size());
    doc.grade = line.grade;
    doc.binary_rel = BinarizeGrade(line.grade);
    doc.features.assign(dim, 0.0);
    for (const auto& [index, value] : line.features) doc.features[index - 1] = value;
    group.documents.push_back(std::move(doc));
  }
  return groups;
}

std::vector<QueryGroup> ParseLetorFile(const std::string& path, int feature_dim) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open LETOR file '" + path + "'");
  return ParseLetor(in, feature_dim);
}

void WriteLetor(std::ostream& out, const std::vector<QueryGroup>& groups) {
  std::ostringstream line;
  line << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& g : groups) {
    for (const auto& d : g.documents) {
      line.str("");
      line << d.grade << " qid:" << g.query_id;
      for (std::size_t j = 0; j < d.features.size(); ++j) {
        line << ' ' << (j + 1) << ':' << d.features[j];
      }
      out << line.str() << '\n';
    }
  }
}

CorpusSplit SplitCorpus(std::vector<QueryGroup> groups, int feature_dim,
                        std::uint64_t seed) {
  Rng rng(DeriveSeed(seed, "split-corpus"));
  Shuffle(std::span<QueryGroup>(groups), rng);
  return AssembleSplit(std::move(groups), feature_dim);
}

CorpusSplit NormalizeFeatures(CorpusSplit splits) {
  const auto dim = static_cast<std::size_t>(splits.feature_dim);
  std::vector<double> lo(dim, std::numeric_limits<double>::infinity());
  std::vector<double> hi(dim, -std::numeric_limits<double>::infinity());
  for (const auto& g : splits.train) {
    for (const auto& d : g.documents) {
      for (std::size_t j = 0; j < dim; ++j) {
        lo[j] = std::min(lo[j], d.features[j]);
        hi[j] = std::max(hi[j], d.features[j]);
      }
    }
  }
  for (auto* split : {&splits.train, &splits.validation, &splits.test}) {
    for (auto& g : *split) {
      for (auto& d : g.documents) {
        for (std::size_t j = 0; j < dim; ++j) {
          const double range = hi[j] - lo[j];
          if (!(range > 0.0)) {
            d.features[j] = 0.0;
          } else {
            d.features[j] = std::clamp((d.features[j] - lo[j]) / range, 0.0, 1.0);
          }
        }
      }
    }
  }
  return splits;
}

std::vector<int> SelectContextFeatures(const std::vector<QueryGroup>& train,
                                       const std::vector<QueryGroup>& validation,
                                       int n, std::uint64_t seed,
                                       ForestConfig config) {
  if (n < 1) throw ValidationError("number of context features must be >= 1");
  Matrix x;
  std::vector<double> y;
  for (const auto* split : {&train, &validation}) {
    for (const auto& g : *split) {
      for (const auto& d : g.documents) {
        x.AppendRow(d.features);
        y.push_back(d.binary_rel);
      }
    }
  }
  if (y.empty()) throw ValidationError("no documents to rank features on");
  const int dim = static_cast<int>(x.cols());
  if (n > dim) {
    throw ValidationError("requested " + std::to_string(n) + " context features of " +
                          std::to_string(dim));
  }
  std::vector<int> order(dim);
  std::iota(order.begin(), order.end(), 0);
  if (n == dim) return order;

  config.seed = seed;
  const auto importance = RegressionForest::Fit(x, y, config).FeatureImportance();
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return importance[a] > importance[b];
  });
  order.resize(n);
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<QueryGroup> SubsampleQueries(const std::vector<QueryGroup>& groups,
                                         double fraction, std::uint64_t seed) {
  if (groups.empty()) throw ValidationError("cannot subsample an empty corpus");
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ValidationError("query fraction must lie in (0, 1]");
  }
  const std::size_t n = groups.size();
  const auto count = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))), 1, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(DeriveSeed(seed, "subsample-queries"));
  Shuffle(std::span<std::size_t>(idx), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  std::vector<QueryGroup> out;
  out.reserve(count);
  for (const auto i : idx) out.push_back(groups[i]);
  return out;
}

CorpusSplit GenerateSyntheticCorpus(int n_queries, int docs_per_query,
                                    int feature_dim, std::uint64_t seed,
                                    const SyntheticCorpusOptions& options) {
  if (n_queries < 1 || docs_per_query < 1 || feature_dim < 1) {
    throw ValidationError("synthetic corpus sizes must all be >= 1");
  }
  Rng rng(DeriveSeed(seed, "synthetic-corpus"));
  if (options.n_informative < 0 || options.n_informative > feature_dim) {
    throw ValidationError("n_informative must lie in [0, feature_dim]");
  }
  std::vector<double> direction(feature_dim);
  double norm2 = 0.0;
  for (auto& v : direction) {
    v = StandardNormal(rng);
    norm2 += v * v;
  }
  if (options.n_informative > 0) {
    std::vector<int> idx(feature_dim);
    std::iota(idx.begin(), idx.end(), 0);
    Shuffle(std::span<int>(idx), rng);
    for (int j = options.n_informative; j < feature_dim; ++j) {
      norm2 -= direction[idx[j]] * direction[idx[j]];
      direction[idx[j]] = 0.0;
    }
  }
  // Var of w.f for f ~ U[0,1)^d is |w|^2 / 12.
  const double noise_sd = options.label_noise * std::sqrt(norm2 / 12.0);

  std::vector<QueryGroup> groups(n_queries);
  std::vector<double> scores;
  scores.reserve(static_cast<std::size_t>(n_queries) * docs_per_query);
  for (int q = 0; q < n_queries; ++q) {
    QueryGroup& g = groups[q];
    g.query_id = "q" + std::to_string(q);
    g.documents.resize(docs_per_query);
    for (int i = 0; i < docs_per_query; ++i) {
      Document& d = g.documents[i];
      d.doc_index = i;
      d.features.resize(feature_dim);
      double s = 0.0;
      for (int j = 0; j < feature_dim; ++j) {
        d.features[j] = UniformUnit(rng);
        s += direction[j] * d.features[j];
      }
      scores.push_back(s + noise_sd * StandardNormal(rng));
    }
  }

  // Grade by rank: cumulative shares 40/55/70/90/100 percent.
  const std::size_t total = scores.size();
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  constexpr double kCumulative[] = {0.40, 0.55, 0.70, 0.90};
  for (std::size_t r = 0; r < total; ++r) {
    const double quantile = (static_cast<double>(r) + 0.5) / static_cast<double>(total);
    int grade = 4;
    for (int k = 0; k < 4; ++k) {
      if (quantile < kCumulative[k]) {
        grade = k;
        break;
      }
    }
    Document& d = groups[order[r] / docs_per_query].documents[order[r] % docs_per_query];
    d.grade = grade;
    d.binary_rel = BinarizeGrade(grade);
  }
  return AssembleSplit(std::move(groups), feature_dim);
}

std::vector<QueryGroup> TrainAndValidation(const CorpusSplit& splits) {
  return ConcatGroups(splits.train, splits.validation);
}

void SaveCorpusCache(std::ostream& out, const CorpusSplit& splits) {
  out << kCacheHeader << '\n';
  out << "#feature_dim " << splits.feature_dim << '\n';
  out << "#context";
  for (const int i : splits.context_feature_indices) out << ' ' << i;
  out << '\n';
  const std::pair<const char*, const std::vector<QueryGroup>*> sections[] = {
      {"train", &splits.train}, {"validation", &splits.validation}, {"test", &splits.test}};
  for (const auto& [name, groups] : sections) {
    out << "#split " << name << '\n';
    WriteLetor(out, *groups);
  }
}

CorpusSplit LoadCorpusCache(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || Trim(line) != kCacheHeader) {
    throw ParseError(1, "missing corpus cache header '" + std::string(kCacheHeader) + "'");
  }
  CorpusSplit splits;
  std::ostringstream sections[3];
  int current = -1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string tag;
    if (line.starts_with("#feature_dim")) {
      fields >> tag >> splits.feature_dim;
    } else if (line.starts_with("#context")) {
      fields >> tag;
      for (int i; fields >> i;) splits.context_feature_indices.push_back(i);
    } else if (line.starts_with("#split")) {
      std::string name;
      fields >> tag >> name;
      if (name == "train") current = 0;
      else if (name == "validation") current = 1;
      else if (name == "test") current = 2;
      else throw ParseError(line_no, "unknown split '" + name + "'");
    } else if (current >= 0) {
      sections[current] << line << '\n';
    }
  }
  std::vector<QueryGroup>* targets[] = {&splits.train, &splits.validation, &splits.test};
  for (int s = 0; s < 3; ++s) {
    std::istringstream text(sections[s].str());
    *targets[s] = ParseLetor(text, splits.feature_dim);
  }
  splits.Validate();
  return splits;
}

}  // namespace cfltr
