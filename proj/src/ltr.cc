#include "cfltr/ltr.h"

#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_map>

#include "cfltr/errors.h"
#include "cfltr/random.h"

namespace cfltr {
namespace {

constexpr const char* kModelHeader = "cfltr-linear-model";

double Dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double Margin(const WeightedPair& p, std::span<const double> w) {
  double m = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) m += w[i] * (p.positive[i] - p.negative[i]);
  return m;
}

}  // namespace

double LinearRankModel::Score(std::span<const double> features) const {
  if (features.size() != weights_.size()) {
    throw ValidationError("model has " + std::to_string(weights_.size()) +
                          " weights but document has " +
                          std::to_string(features.size()) + " features");
  }
  return Dot(weights_, features);
}

void LinearRankModel::Save(std::ostream& out) const {
  out << kModelHeader << " v1 feature_dim=" << weights_.size()
      << " l2=" << std::setprecision(std::numeric_limits<double>::max_digits10) << l2_
      << " seed=" << seed_ << '\n';
  for (const double w : weights_) out << w << '\n';
}

LinearRankModel LinearRankModel::Load(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw ParseError(1, "empty model file");
  std::istringstream fields(header);
  std::string magic, version;
  fields >> magic >> version;
  if (magic != kModelHeader || version != "v1") {
    throw ParseError(1, "not a cfltr-linear-model v1 file");
  }
  std::size_t dim = 0;
  double l2 = 0.0;
  std::uint64_t seed = 0;
  for (std::string kv; fields >> kv;) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ParseError(1, "bad header field '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    const std::string value = kv.substr(eq + 1);
    if (key == "feature_dim") dim = std::stoul(value);
    else if (key == "l2") l2 = std::stod(value);
    else if (key == "seed") seed = std::stoull(value);
  }
  std::vector<double> weights;
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      weights.push_back(std::stod(line));
    } catch (const std::exception&) {
      throw ParseError(line_no, "invalid weight '" + line + "'");
    }
  }
  if (weights.size() != dim) {
    throw ParseError(line_no, "expected " + std::to_string(dim) + " weights, read " +
                                  std::to_string(weights.size()));
  }
  return LinearRankModel(std::move(weights), l2, seed);
}

double NegativeMass(const ListItem& item) {
  if (item.negative_weight >= 0.0) return item.negative_weight;
  return item.label == 0 ? 1.0 : 0.0;
}

std::vector<WeightedPair> ExpandPairs(const std::vector<TrainingList>& lists,
                                      const std::vector<QueryGroup>& corpus) {
  std::unordered_map<std::string, const QueryGroup*> by_id;
  for (const auto& g : corpus) by_id.emplace(g.query_id, &g);

  std::vector<WeightedPair> pairs;
  for (const auto& list : lists) {
    const auto it = by_id.find(list.query_id);
    if (it == by_id.end()) throw LookupError("unknown query '" + list.query_id + "'");
    const auto& docs = it->second->documents;
    auto features = [&](int doc_index) -> std::span<const double> {
      if (doc_index < 0 || doc_index >= static_cast<int>(docs.size())) {
        throw LookupError("query '" + list.query_id + "' has no document " +
                          std::to_string(doc_index));
      }
      return docs[doc_index].features;
    };
    for (const auto& item : list.items) features(item.doc_index);
    for (const auto& pos : list.items) {
      if (pos.label != 1 || !(pos.weight > 0.0)) continue;
      for (const auto& neg : list.items) {
        if (&neg == &pos) continue;
        const double weight = pos.weight * NegativeMass(neg);
        if (!(weight > 0.0)) continue;
        pairs.push_back({features(pos.doc_index), features(neg.doc_index), weight});
      }
    }
  }
  return pairs;
}

double PairwiseObjective(std::span<const WeightedPair> pairs,
                         std::span<const double> weights, double l2) {
  double loss = 0.0;
  for (const auto& p : pairs) loss += p.weight * std::max(0.0, 1.0 - Margin(p, weights));
  if (!pairs.empty()) loss /= static_cast<double>(pairs.size());
  return loss + l2 * Dot(weights, weights);
}

std::vector<double> PairwiseGradient(std::span<const WeightedPair> pairs,
                                     std::span<const double> weights, double l2) {
  std::vector<double> grad(weights.size(), 0.0);
  for (const auto& p : pairs) {
    if (Margin(p, weights) < 1.0) {
      for (std::size_t i = 0; i < weights.size(); ++i) {
        grad[i] -= p.weight * (p.positive[i] - p.negative[i]);
      }
    }
  }
  const double n = pairs.empty() ? 1.0 : static_cast<double>(pairs.size());
  for (std::size_t i = 0; i < weights.size(); ++i) grad[i] = grad[i] / n + 2.0 * l2 * weights[i];
  return grad;
}

LinearRankModel TrainPairwise(std::span<const WeightedPair> pairs, int feature_dim,
                              const PairwiseOptions& options) {
  if (pairs.empty()) throw ValidationError("pairwise training needs at least one pair");
  const auto dim = static_cast<std::size_t>(feature_dim);
  for (const auto& p : pairs) {
    if (p.positive.size() != dim || p.negative.size() != dim) {
      throw ValidationError("pair feature dimension differs from model dimension");
    }
  }
  // The weights are stored as scale * v so that the L2 shrink of every step
  // costs O(1) instead of O(dim).
  std::vector<double> v(dim, 0.0);
  double scale = 1.0;
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(DeriveSeed(options.seed, "pairwise-sgd"));
  const double lr = options.learning_rate;
  const double shrink = 1.0 - 2.0 * lr * options.l2;
  if (!(shrink > 0.0)) throw ValidationError("learning_rate * l2 must be below 0.5");

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    Shuffle(std::span<std::size_t>(order), rng);
    double running = 0.0;
    for (const std::size_t i : order) {
      const WeightedPair& p = pairs[i];
      double dot = 0.0;
      for (std::size_t j = 0; j < dim; ++j) dot += v[j] * (p.positive[j] - p.negative[j]);
      const double margin = scale * dot;
      scale *= shrink;
      if (margin < 1.0) {
        running += p.weight * (1.0 - margin);
        const double step = lr * p.weight / scale;
        for (std::size_t j = 0; j < dim; ++j) v[j] += step * (p.positive[j] - p.negative[j]);
      }
      if (scale < 1e-100) {
        for (double& x : v) x *= scale;
        scale = 1.0;
      }
    }
    double norm2 = 0.0;
    for (const double x : v) norm2 += x * x;
    const double objective = running / static_cast<double>(pairs.size()) +
                             options.l2 * scale * scale * norm2;
    if (!std::isfinite(objective)) {
      throw TrainingError(epoch, "pairwise objective is not finite");
    }
  }
  std::vector<double> w(dim);
  for (std::size_t j = 0; j < dim; ++j) w[j] = scale * v[j];
  LinearRankModel model(std::move(w), options.l2, options.seed);
  model.set_training_metadata(options.epochs, options.learning_rate);
  return model;
}

std::vector<TrainingList> RelevanceLists(const std::vector<QueryGroup>& groups) {
  std::vector<TrainingList> lists;
  lists.reserve(groups.size());
  for (const auto& g : groups) {
    TrainingList list{g.query_id, {}};
    for (const auto& d : g.documents) list.items.push_back({d.doc_index, d.binary_rel, 1.0});
    lists.push_back(std::move(list));
  }
  return lists;
}

ProductionRankerResult TrainProductionRanker(const CorpusSplit& corpus, double fraction,
                                             std::uint64_t seed,
                                             const PairwiseOptions& options) {
  const auto pool = TrainAndValidation(corpus);
  ProductionRankerResult result;
  auto sample = SubsampleQueries(pool, fraction, DeriveSeed(seed, "production-queries"));
  auto pairs = ExpandPairs(RelevanceLists(sample), sample);
  result.fraction_used = fraction;
  if (pairs.empty() && fraction < 0.1) {
    result.warning = "no training pairs at fraction " + std::to_string(fraction) +
                     "; retrying with 0.1";
    result.fraction_used = 0.1;
    sample = SubsampleQueries(pool, 0.1, DeriveSeed(seed, "production-queries"));
    pairs = ExpandPairs(RelevanceLists(sample), sample);
  }
  if (pairs.empty()) throw FitError("production ranker subsample has no preference pairs");
  PairwiseOptions opts = options;
  opts.seed = DeriveSeed(seed, "production-sgd");
  result.model = TrainPairwise(pairs, corpus.feature_dim, opts);
  return result;
}

}  // namespace cfltr
