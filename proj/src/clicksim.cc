#include "cfltr/clicksim.h"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "cfltr/errors.h"

namespace cfltr {
namespace {

constexpr const char* kImpressionHeader = "query_id,doc_index,position,arm,clicked";

std::vector<std::string> SplitCsv(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

}  // namespace

ClickModelParams ClickModelParams::Draw(int context_dim, std::uint64_t seed, int k_max,
                                        double noise_click_prob) {
  ClickModelParams p;
  p.k_max = k_max;
  p.noise_click_prob = noise_click_prob;
  Rng rng(DeriveSeed(seed, "click-model-w"));
  p.w.resize(context_dim);
  for (auto& v : p.w) v = UniformReal(rng, -1.0, 1.0);
  return p;
}

void ClickModelParams::Validate() const {
  if (k_max < 2) throw ValidationError("k_max must be >= 2");
  if (!(noise_click_prob >= 0.0 && noise_click_prob <= 1.0)) {
    throw ValidationError("noise_click_prob must lie in [0, 1]");
  }
  for (const double v : w) {
    if (!(v >= -1.0 && v < 1.0)) throw ValidationError("w components must lie in [-1, 1)");
  }
}

std::vector<double> ContextOf(const Document& doc, std::span<const int> context_indices) {
  std::vector<double> x(context_indices.size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = doc.features[context_indices[i]];
  return x;
}

std::vector<std::size_t> SampleSearches(const std::vector<QueryGroup>& groups,
                                        double avg_searches_per_query, std::uint64_t seed) {
  if (groups.empty()) throw ValidationError("no query groups to sample searches from");
  if (!(avg_searches_per_query > 0.0)) {
    throw ValidationError("average searches per query must be > 0");
  }
  const auto n = static_cast<std::size_t>(
      std::llround(avg_searches_per_query * static_cast<double>(groups.size())));
  Rng rng(DeriveSeed(seed, "sample-searches"));
  std::vector<std::size_t> draws(n);
  for (auto& d : draws) d = UniformIndex(rng, groups.size());
  return draws;
}

std::vector<int> RankAndTruncate(const QueryGroup& group, const LinearRankModel& ranker,
                                 int k_max) {
  const std::size_t n = group.documents.size();
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) scores[i] = ranker.Score(group.documents[i].features);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  if (order.size() > static_cast<std::size_t>(k_max)) order.resize(k_max);
  for (auto& i : order) i = group.documents[i].doc_index;
  return order;
}

int AssignArm(std::uint64_t counter, std::uint64_t seed, int k) {
  if (k < 2) throw ValidationError("need at least two arms");
  Rng rng(DeriveSeed(seed, "assign-arm", counter));
  return 1 + static_cast<int>(UniformIndex(rng, static_cast<std::uint64_t>(k)));
}

void ApplySwap(std::vector<int>& ranking, int arm) {
  if (arm <= 1 || static_cast<std::size_t>(arm) > ranking.size()) return;
  std::swap(ranking[0], ranking[arm - 1]);
}

double ExaminationProb(std::span<const double> x, int k, const ClickModelParams& params) {
  if (k < 1) throw ValidationError("positions are 1-based");
  if (x.size() != params.w.size()) {
    throw ValidationError("context has " + std::to_string(x.size()) +
                          " features, click model expects " +
                          std::to_string(params.w.size()));
  }
  double wx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) wx += params.w[i] * x[i];
  const double exponent = std::max(wx + 1.0, 0.0);
  return std::pow(static_cast<double>(k), -exponent);
}

double ClickProb(std::span<const double> x, int k, int binary_rel,
                 const ClickModelParams& params) {
  const double relevance = binary_rel == 1 ? 1.0 : params.noise_click_prob;
  return ExaminationProb(x, k, params) * relevance;
}

int GenerateClick(std::span<const double> x, int k, int binary_rel,
                  const ClickModelParams& params, Rng& rng) {
  if (!Bernoulli(rng, ExaminationProb(x, k, params))) return 0;
  if (binary_rel == 1) return 1;
  return Bernoulli(rng, params.noise_click_prob) ? 1 : 0;
}

std::vector<ImpressionRecord> RunSimulation(const std::vector<QueryGroup>& groups,
                                            const LinearRankModel& ranker,
                                            std::span<const int> context_indices,
                                            const ClickModelParams& params,
                                            const SimulationOptions& options,
                                            std::uint64_t seed) {
  params.Validate();
  const auto searches = SampleSearches(groups, options.avg_searches_per_query, seed);

  // Rankings and contexts are deterministic per group; compute them once.
  std::vector<std::vector<int>> rankings(groups.size());
  std::vector<std::vector<std::vector<double>>> contexts(groups.size());
  std::vector<char> prepared(groups.size(), 0);

  std::vector<ImpressionRecord> log;
  log.reserve(searches.size() * params.k_max);
  for (std::size_t s = 0; s < searches.size(); ++s) {
    const std::size_t g = searches[s];
    const QueryGroup& group = groups[g];
    if (!prepared[g]) {
      rankings[g] = RankAndTruncate(group, ranker, params.k_max);
      contexts[g].resize(group.documents.size());
      for (const int d : rankings[g]) {
        contexts[g][d] = ContextOf(group.documents[d], context_indices);
      }
      prepared[g] = 1;
    }
    const int arm = options.interventions ? AssignArm(s, seed, params.k_max) : 1;
    std::vector<int> shown = rankings[g];
    ApplySwap(shown, arm);
    Rng rng(DeriveSeed(seed, "search-clicks", s));
    for (std::size_t pos = 0; pos < shown.size(); ++pos) {
      const int d = shown[pos];
      const auto& x = contexts[g][d];
      ImpressionRecord rec;
      rec.query_id = group.query_id;
      rec.doc_index = d;
      rec.position = static_cast<int>(pos) + 1;
      rec.arm = arm;
      rec.clicked =
          GenerateClick(x, rec.position, group.documents[d].binary_rel, params, rng);
      rec.context = x;
      log.push_back(std::move(rec));
    }
  }
  return log;
}

std::vector<std::span<const ImpressionRecord>> SplitSearches(
    std::span<const ImpressionRecord> log) {
  std::vector<std::span<const ImpressionRecord>> searches;
  std::size_t start = 0;
  for (std::size_t i = 1; i <= log.size(); ++i) {
    if (i == log.size() || log[i].position == 1) {
      if (i > start) searches.push_back(log.subspan(start, i - start));
      start = i;
    }
  }
  return searches;
}

std::vector<ImpressionRecord> ControlArm(std::span<const ImpressionRecord> log) {
  std::vector<ImpressionRecord> out;
  for (const auto& r : log) {
    if (r.arm == 1) out.push_back(r);
  }
  return out;
}

void WriteImpressions(std::ostream& csv, std::ostream& contexts,
                      std::span<const ImpressionRecord> log) {
  csv << kImpressionHeader << '\n';
  contexts << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& r : log) {
    csv << r.query_id << ',' << r.doc_index << ',' << r.position << ',' << r.arm << ','
        << r.clicked << '\n';
    for (std::size_t i = 0; i < r.context.size(); ++i) {
      if (i) contexts << ',';
      contexts << r.context[i];
    }
    contexts << '\n';
  }
}

std::vector<ImpressionRecord> ReadImpressions(std::istream& csv, std::istream& contexts) {
  std::string line;
  if (!std::getline(csv, line) || line != kImpressionHeader) {
    throw ParseError(1, std::string("expected header '") + kImpressionHeader + "'");
  }
  std::vector<ImpressionRecord> log;
  std::size_t line_no = 1;
  std::string ctx_line;
  while (std::getline(csv, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = SplitCsv(line);
    if (fields.size() != 5) throw ParseError(line_no, "expected 5 fields");
    ImpressionRecord r;
    try {
      r.query_id = fields[0];
      r.doc_index = std::stoi(fields[1]);
      r.position = std::stoi(fields[2]);
      r.arm = std::stoi(fields[3]);
      r.clicked = std::stoi(fields[4]);
    } catch (const std::exception&) {
      throw ParseError(line_no, "non-numeric impression field");
    }
    if (!std::getline(contexts, ctx_line)) {
      throw ParseError(line_no, "context sidecar has fewer rows than the impression log");
    }
    if (!ctx_line.empty()) {
      for (const auto& v : SplitCsv(ctx_line)) {
        try {
          r.context.push_back(std::stod(v));
        } catch (const std::exception&) {
          throw ParseError(line_no, "non-numeric context value '" + v + "'");
        }
      }
    }
    log.push_back(std::move(r));
  }
  return log;
}

}  // namespace cfltr
