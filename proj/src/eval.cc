#include "cfltr/eval.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cfltr/errors.h"

namespace cfltr {
namespace {

std::string Key(const std::string& query_id, int doc_index) {
  std::string key = query_id;
  key.push_back('\x1f');
  key += std::to_string(doc_index);
  return key;
}

double MeanOf(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double SampleVariance(std::span<const double> v, double mean) {
  double s = 0.0;
  for (const double x : v) s += (x - mean) * (x - mean);
  return s / static_cast<double>(v.size() - 1);
}

// Continued fraction for the incomplete beta function (modified Lentz).
double BetaContinuedFraction(double a, double b, double x) {
  constexpr int kMaxIterations = 500;
  constexpr double kEpsilon = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIterations; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < kEpsilon) break;
  }
  return h;
}

}  // namespace

TrueTauOracle::TrueTauOracle(const std::vector<QueryGroup>& groups,
                             std::vector<int> context_indices, ClickModelParams params)
    : context_indices_(std::move(context_indices)), params_(std::move(params)) {
  for (const auto& g : groups) {
    for (const auto& d : g.documents) {
      entries_[Key(g.query_id, d.doc_index)] =
          Entry{ContextOf(d, context_indices_), d.binary_rel};
    }
  }
}

double TrueTauOracle::TrueTau(std::span<const double> x, int binary_rel, int k,
                              const ClickModelParams& params) {
  if (k < 1 || k > params.k_max) {
    throw ValidationError("position " + std::to_string(k) + " outside 1.." +
                          std::to_string(params.k_max));
  }
  if (k == 1) return 0.0;
  return cfltr::ClickProb(x, 1, binary_rel, params) - cfltr::ClickProb(x, k, binary_rel, params);
}

const TrueTauOracle::Entry& TrueTauOracle::Find(const std::string& query_id,
                                                int doc_index) const {
  const auto it = entries_.find(Key(query_id, doc_index));
  if (it == entries_.end()) {
    throw LookupError("unknown document " + std::to_string(doc_index) + " of query '" +
                      query_id + "'");
  }
  return it->second;
}

double TrueTauOracle::TrueTau(const std::string& query_id, int doc_index, int k) const {
  const Entry& e = Find(query_id, doc_index);
  return TrueTau(e.context, e.binary_rel, k, params_);
}

double TrueTauOracle::ClickProb(const std::string& query_id, int doc_index, int k) const {
  const Entry& e = Find(query_id, doc_index);
  return cfltr::ClickProb(e.context, k, e.binary_rel, params_);
}

int TrueTauOracle::BinaryRel(const std::string& query_id, int doc_index) const {
  return Find(query_id, doc_index).binary_rel;
}

const std::vector<double>& TrueTauOracle::Context(const std::string& query_id,
                                                  int doc_index) const {
  return Find(query_id, doc_index).context;
}

TauRmseReport TauRmse(const TauEstimateFunction& estimate, const TrueTauOracle& oracle,
                      const std::vector<QueryGroup>& test) {
  double sse[2] = {0.0, 0.0};
  std::size_t count[2] = {0, 0};
  const int k_max = oracle.params().k_max;
  for (const auto& g : test) {
    for (const auto& d : g.documents) {
      const auto& x = oracle.Context(g.query_id, d.doc_index);
      const int r = d.binary_rel;
      for (int k = 2; k <= k_max; ++k) {
        const double err = estimate(x, k) - TrueTauOracle::TrueTau(x, r, k, oracle.params());
        sse[r] += err * err;
        ++count[r];
      }
    }
  }
  TauRmseReport report;
  report.n_r0 = count[0];
  report.n_r1 = count[1];
  report.n = count[0] + count[1];
  if (report.n == 0) throw ValidationError("empty test set");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  report.rmse = std::sqrt((sse[0] + sse[1]) / static_cast<double>(report.n));
  report.rmse_r0 = count[0] ? std::sqrt(sse[0] / static_cast<double>(count[0])) : nan;
  report.rmse_r1 = count[1] ? std::sqrt(sse[1] / static_cast<double>(count[1])) : nan;
  return report;
}

double Dcg(std::span<const int> ranked_relevance, int cutoff) {
  double dcg = 0.0;
  const std::size_t n = std::min<std::size_t>(ranked_relevance.size(), cutoff);
  for (std::size_t j = 0; j < n; ++j) {
    dcg += ranked_relevance[j] / std::log2(static_cast<double>(j) + 2.0);
  }
  return dcg;
}

double QueryNdcg(std::span<const int> ranked_relevance, int cutoff) {
  std::vector<int> ideal(ranked_relevance.begin(), ranked_relevance.end());
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  const double best = Dcg(ideal, cutoff);
  if (best <= 0.0) return 0.0;
  return Dcg(ranked_relevance, cutoff) / best;
}

double NdcgAt10(const LinearRankModel& model, const std::vector<QueryGroup>& test) {
  double total = 0.0;
  std::size_t retained = 0;
  for (const auto& g : test) {
    const auto& docs = g.documents;
    if (std::none_of(docs.begin(), docs.end(), [](const Document& d) { return d.binary_rel; })) {
      continue;
    }
    std::vector<double> scores(docs.size());
    for (std::size_t i = 0; i < docs.size(); ++i) scores[i] = model.Score(docs[i].features);
    std::vector<std::size_t> order(docs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return docs[a].doc_index < docs[b].doc_index;
    });
    std::vector<int> ranked(docs.size());
    for (std::size_t i = 0; i < order.size(); ++i) ranked[i] = docs[order[i]].binary_rel;
    total += QueryNdcg(ranked, 10);
    ++retained;
  }
  if (retained == 0) throw ValidationError("no test query has a relevant document");
  return total / static_cast<double>(retained);
}

double RegularizedIncompleteBeta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw ValidationError("incomplete beta needs a, b > 0");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                           a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  // The continued fraction converges fastest for x < (a + 1) / (a + b + 2).
  if (x < (a + 1.0) / (a + b + 2.0)) return front * BetaContinuedFraction(a, b, x) / a;
  return 1.0 - front * BetaContinuedFraction(b, a, 1.0 - x) / b;
}

double StudentTCdf(double t, double df) {
  if (!(df > 0.0)) throw ValidationError("degrees of freedom must be > 0");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * RegularizedIncompleteBeta(df / 2.0, 0.5, df / (df + t * t));
  return t > 0 ? 1.0 - tail : tail;
}

WelchResult WelchTTest(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) {
    throw ValidationError("Welch t-test needs at least two observations per sample");
  }
  const double ma = MeanOf(a), mb = MeanOf(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double va = SampleVariance(a, ma) / na;
  const double vb = SampleVariance(b, mb) / nb;
  WelchResult r;
  if (va + vb == 0.0) {
    r.df = na + nb - 2.0;
    if (ma == mb) {
      r.t = 0.0;
      r.p_two_sided = 1.0;
    } else {
      r.t = ma > mb ? std::numeric_limits<double>::infinity()
                    : -std::numeric_limits<double>::infinity();
      r.p_two_sided = 0.0;
    }
    return r;
  }
  r.t = (ma - mb) / std::sqrt(va + vb);
  r.df = (va + vb) * (va + vb) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  r.p_two_sided = RegularizedIncompleteBeta(r.df / 2.0, 0.5, r.df / (r.df + r.t * r.t));
  return r;
}

}  // namespace cfltr
