#include "cfltr/debias.h"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <unordered_map>

#include "cfltr/errors.h"
#include "cfltr/random.h"

namespace cfltr {

TauFunction BankTau(const TauEstimatorBank& bank) {
  return [&bank](const ImpressionRecord& record, int position) {
    return bank.Predict(record.context, position);
  };
}

PropensityFunction CpbmPropensity(const CpbmModel& model) {
  return [&model](std::span<const double> x, int position) {
    return model.Propensity(x, position);
  };
}

std::vector<CorrectedExample> CorrectAndResample(std::span<const ImpressionRecord> control_log,
                                                 const TauFunction& tau, std::uint64_t seed) {
  struct Tally {
    const ImpressionRecord* first = nullptr;
    std::vector<std::pair<int, int>> position_counts;  // (position, impressions)
    int n_obs = 0;
    int clicks = 0;
  };
  std::unordered_map<std::string, std::size_t> index;
  std::vector<Tally> tallies;
  for (const auto& r : control_log) {
    std::string key = r.query_id;
    key.push_back('\x1f');
    key += std::to_string(r.doc_index);
    auto [it, inserted] = index.try_emplace(std::move(key), tallies.size());
    if (inserted) tallies.push_back(Tally{&r, {}, 0, 0});
    Tally& t = tallies[it->second];
    ++t.n_obs;
    t.clicks += r.clicked;
    auto pc = std::find_if(t.position_counts.begin(), t.position_counts.end(),
                           [&](const auto& e) { return e.first == r.position; });
    if (pc == t.position_counts.end()) {
      t.position_counts.emplace_back(r.position, 1);
    } else {
      ++pc->second;
    }
  }

  std::vector<CorrectedExample> out;
  out.reserve(tallies.size());
  for (std::size_t i = 0; i < tallies.size(); ++i) {
    const Tally& t = tallies[i];
    CorrectedExample e;
    e.query_id = t.first->query_id;
    e.doc_index = t.first->doc_index;
    e.x = t.first->context;
    // Most frequent position, ties toward the lower position.
    auto best = t.position_counts.front();
    for (const auto& pc : t.position_counts) {
      if (pc.second > best.second || (pc.second == best.second && pc.first < best.first)) {
        best = pc;
      }
    }
    e.position = best.first;
    e.n_obs = t.n_obs;
    e.clicks = t.clicks;
    e.ctr_obs = static_cast<double>(t.clicks) / t.n_obs;
    e.tau_hat = tau(*t.first, e.position);
    e.theta = std::clamp(e.ctr_obs + e.tau_hat, 0.0, 1.0);
    Rng rng(DeriveSeed(seed, "resample-clicks", i));
    e.resampled_clicks = Binomial(rng, e.n_obs, e.theta);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<IpsWeightedClick> IpsWeights(std::span<const ImpressionRecord> control_log,
                                         const PropensityFunction& propensity,
                                         std::optional<PropensityClip> clip) {
  std::vector<IpsWeightedClick> out;
  for (std::size_t i = 0; i < control_log.size(); ++i) {
    const ImpressionRecord& r = control_log[i];
    if (!r.clicked) continue;
    double p = propensity(r.context, r.position);
    if (clip) {
      p = std::clamp(p, clip->lo, clip->hi - kClipUpperEpsilon);
    } else if (!(p > 0.0)) {
      throw Error("non-positive propensity " + std::to_string(p) + " at position " +
                  std::to_string(r.position));
    }
    out.push_back({r.query_id, r.doc_index, r.position, p, 1.0 / p, i});
  }
  return out;
}

std::vector<TrainingList> ResampledTrainingLists(const std::vector<CorrectedExample>& examples) {
  std::unordered_map<std::string, std::size_t> index;
  std::vector<TrainingList> lists;
  for (const auto& e : examples) {
    auto [it, inserted] = index.try_emplace(e.query_id, lists.size());
    if (inserted) lists.push_back(TrainingList{e.query_id, {}});
    const int label = e.resampled_clicks >= 1 ? 1 : 0;
    const double weight = label ? static_cast<double>(e.resampled_clicks) : 1.0;
    const double non_clicks = static_cast<double>(e.n_obs - e.resampled_clicks) / e.n_obs;
    lists[it->second].items.push_back({e.doc_index, label, weight, non_clicks});
  }
  return lists;
}

std::vector<TrainingList> IpsTrainingLists(std::span<const ImpressionRecord> control_log,
                                           const std::vector<IpsWeightedClick>& weights) {
  std::vector<double> record_weight(control_log.size(), 0.0);
  for (const auto& w : weights) {
    if (w.record_index >= control_log.size()) {
      throw ValidationError("IPS weight refers to a record outside the log");
    }
    record_weight[w.record_index] = w.weight;
  }
  std::vector<TrainingList> lists;
  for (const auto search : SplitSearches(control_log)) {
    TrainingList list{search.front().query_id, {}};
    for (const auto& r : search) {
      const std::size_t i = static_cast<std::size_t>(&r - control_log.data());
      if (r.clicked && record_weight[i] > 0.0) {
        list.items.push_back({r.doc_index, 1, record_weight[i]});
      } else {
        list.items.push_back({r.doc_index, 0, 1.0});
      }
    }
    lists.push_back(std::move(list));
  }
  return lists;
}

void WriteCorrectedExamples(std::ostream& out, const std::vector<CorrectedExample>& examples) {
  out << "query_id,doc_index,n_obs,ctr_obs,tau_hat,theta,resampled_clicks\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& e : examples) {
    out << e.query_id << ',' << e.doc_index << ',' << e.n_obs << ',' << e.ctr_obs << ','
        << e.tau_hat << ',' << e.theta << ',' << e.resampled_clicks << '\n';
  }
}

}  // namespace cfltr
