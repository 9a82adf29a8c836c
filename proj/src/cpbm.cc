#include "cfltr/cpbm.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_map>

#include "cfltr/errors.h"
#include "cfltr/random.h"

namespace cfltr {
namespace {

constexpr double kClip = 1e-6;
constexpr int kFormatVersion = 1;

double Sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

InterventionSetDataset BuildCpbmDataset(std::span<const ImpressionRecord> log, int k_max) {
  if (log.empty()) throw FitError("empty impression log");
  struct Tally {
    const ImpressionRecord* first = nullptr;
    std::vector<int> impressions;
    std::vector<int> clicks;
  };
  std::unordered_map<std::string, std::size_t> index;
  std::vector<Tally> tallies;
  for (const auto& r : log) {
    if (r.position < 1 || r.position > k_max) {
      throw ValidationError("position " + std::to_string(r.position) + " outside 1.." +
                            std::to_string(k_max));
    }
    std::string key = r.query_id;
    key.push_back('\x1f');
    key += std::to_string(r.doc_index);
    auto [it, inserted] = index.try_emplace(std::move(key), tallies.size());
    if (inserted) {
      tallies.push_back({&r, std::vector<int>(k_max + 1, 0), std::vector<int>(k_max + 1, 0)});
    }
    Tally& t = tallies[it->second];
    ++t.impressions[r.position];
    t.clicks[r.position] += r.clicked;
  }

  InterventionSetDataset data;
  data.k_max = k_max;
  for (const auto& t : tallies) {
    InterventionRow row;
    for (int k = 1; k <= k_max; ++k) {
      if (t.impressions[k] == 0) continue;
      row.positions.push_back(k);
      row.impressions.push_back(t.impressions[k]);
      row.click_rates.push_back(static_cast<double>(t.clicks[k]) / t.impressions[k]);
    }
    if (row.positions.size() < 2) continue;
    row.query_id = t.first->query_id;
    row.doc_index = t.first->doc_index;
    row.context = t.first->context;
    std::vector<int> by_frequency = row.positions;
    std::stable_sort(by_frequency.begin(), by_frequency.end(), [&](int a, int b) {
      return t.impressions[a] > t.impressions[b];
    });
    row.intervention_pair = {std::min(by_frequency[0], by_frequency[1]),
                             std::max(by_frequency[0], by_frequency[1])};
    data.rows.push_back(std::move(row));
  }
  if (data.rows.empty()) throw FitError("no query-document pair was shown at two positions");
  return data;
}

void CpbmModel::Layout(int context_dim, int hidden1, int hidden2, int k_max) {
  context_dim_ = context_dim;
  hidden1_ = hidden1;
  hidden2_ = hidden2;
  k_max_ = k_max;
  std::size_t offset = 0;
  auto layer = [&](std::size_t in, std::size_t out) {
    Layer l{in, out, offset};
    offset += out * in + out;
    return l;
  };
  const std::size_t t = context_dim, h1 = hidden1, h2 = hidden2, k = k_max;
  exam_ = {layer(t, h1), layer(h1, h2), layer(h2, k)};
  rel_ = {layer(t, h1), layer(h1, h2), layer(h2, k * k)};
  params_.assign(offset, 0.0);
}

CpbmModel::CpbmModel(int context_dim, const CpbmHyper& hyper) {
  if (context_dim < 1 || hyper.hidden1 < 1 || hyper.hidden2 < 1 || hyper.k_max < 2) {
    throw ValidationError("invalid CPBM dimensions");
  }
  Layout(context_dim, hyper.hidden1, hyper.hidden2, hyper.k_max);
  Rng rng(DeriveSeed(hyper.seed, "cpbm-init"));
  for (const Net* net : {&exam_, &rel_}) {
    for (const Layer* l : {&net->l1, &net->l2, &net->l3}) {
      const double a = std::sqrt(6.0 / static_cast<double>(l->in + l->out));
      for (std::size_t i = 0; i < l->in * l->out; ++i) {
        params_[l->offset + i] = UniformReal(rng, -a, a);
      }
    }
  }
}

CpbmModel::Hidden CpbmModel::Forward(const Net& net, std::span<const double> x) const {
  Hidden h;
  auto dense = [&](const Layer& l, std::span<const double> in, std::vector<double>& out) {
    out.assign(l.out, 0.0);
    const double* w = params_.data() + l.offset;
    const double* b = w + l.out * l.in;
    for (std::size_t o = 0; o < l.out; ++o) {
      double z = b[o];
      const double* row = w + o * l.in;
      for (std::size_t i = 0; i < l.in; ++i) z += row[i] * in[i];
      out[o] = std::tanh(z);
    }
  };
  dense(net.l1, x, h.h1);
  dense(net.l2, h.h1, h.h2);
  return h;
}

double CpbmModel::Output(const Layer& layer, const std::vector<double>& h2,
                         std::size_t unit) const {
  const double* w = params_.data() + layer.offset + unit * layer.in;
  double z = params_[layer.offset + layer.out * layer.in + unit];
  for (std::size_t i = 0; i < layer.in; ++i) z += w[i] * h2[i];
  return Sigmoid(z);
}

void CpbmModel::Backward(const Net& net, std::span<const double> x, const Hidden& hidden,
                         std::span<const std::pair<std::size_t, double>> output_grads,
                         std::vector<double>& grad) const {
  // output_grads holds d(loss)/d(pre-activation) for the listed output units.
  const Layer& l3 = net.l3;
  std::vector<double> d_h2(l3.in, 0.0);
  for (const auto& [unit, dz] : output_grads) {
    const double* w = params_.data() + l3.offset + unit * l3.in;
    double* gw = grad.data() + l3.offset + unit * l3.in;
    for (std::size_t i = 0; i < l3.in; ++i) {
      gw[i] += dz * hidden.h2[i];
      d_h2[i] += dz * w[i];
    }
    grad[l3.offset + l3.out * l3.in + unit] += dz;
  }
  auto back = [&](const Layer& l, std::span<const double> in, const std::vector<double>& out,
                  const std::vector<double>& d_out, std::vector<double>* d_in) {
    const double* w = params_.data() + l.offset;
    double* gw = grad.data() + l.offset;
    double* gb = gw + l.out * l.in;
    if (d_in) d_in->assign(l.in, 0.0);
    for (std::size_t o = 0; o < l.out; ++o) {
      const double dz = d_out[o] * (1.0 - out[o] * out[o]);
      if (dz == 0.0) continue;
      gb[o] += dz;
      double* gw_row = gw + o * l.in;
      for (std::size_t i = 0; i < l.in; ++i) gw_row[i] += dz * in[i];
      if (!d_in) continue;
      const double* w_row = w + o * l.in;
      double* d = d_in->data();
      for (std::size_t i = 0; i < l.in; ++i) d[i] += dz * w_row[i];
    }
  };
  std::vector<double> d_h1;
  back(net.l2, hidden.h1, hidden.h2, d_h2, &d_h1);
  back(net.l1, x, hidden.h1, d_h1, nullptr);
}

double CpbmModel::LossAndGradient(std::span<const InterventionRow* const> rows,
                                  std::vector<double>* grad) const {
  if (grad) grad->assign(params_.size(), 0.0);
  if (rows.empty()) return 0.0;
  const double scale = 1.0 / static_cast<double>(rows.size());
  double total = 0.0;
  std::vector<std::pair<std::size_t, double>> exam_grads;
  for (const InterventionRow* row : rows) {
    CheckInput(row->context);
    const Hidden he = Forward(exam_, row->context);
    const Hidden hr = Forward(rel_, row->context);
    const auto a = static_cast<std::size_t>(row->intervention_pair.first - 1);
    const auto b = static_cast<std::size_t>(row->intervention_pair.second - 1);
    const std::size_t k = static_cast<std::size_t>(k_max_);
    const double s_ab = Output(rel_.l3, hr.h2, a * k + b);
    const double s_ba = Output(rel_.l3, hr.h2, b * k + a);
    const double fr = 0.5 * (s_ab + s_ba);
    double d_fr = 0.0;
    exam_grads.clear();
    for (std::size_t i = 0; i < row->positions.size(); ++i) {
      const auto unit = static_cast<std::size_t>(row->positions[i] - 1);
      const double fp = Output(exam_.l3, he.h2, unit);
      const double y = row->click_rates[i];
      const double q = fp * fr;
      const double qc = std::clamp(q, kClip, 1.0 - kClip);
      total -= y * std::log(qc) + (1.0 - y) * std::log(1.0 - qc);
      if (!grad || q != qc) continue;
      const double d_q = (q - y) / (q * (1.0 - q)) * scale;
      exam_grads.emplace_back(unit, d_q * fr * fp * (1.0 - fp));
      d_fr += d_q * fp;
    }
    if (!grad) continue;
    Backward(exam_, row->context, he, exam_grads, *grad);
    const std::pair<std::size_t, double> rel_grads[] = {
        {a * k + b, d_fr * 0.5 * s_ab * (1.0 - s_ab)},
        {b * k + a, d_fr * 0.5 * s_ba * (1.0 - s_ba)}};
    Backward(rel_, row->context, hr, rel_grads, *grad);
  }
  return total * scale;
}

double CpbmModel::Loss(const InterventionSetDataset& data) const {
  std::vector<const InterventionRow*> rows;
  rows.reserve(data.rows.size());
  for (const auto& r : data.rows) rows.push_back(&r);
  return LossAndGradient(rows, nullptr);
}

CpbmModel CpbmModel::Fit(const InterventionSetDataset& data, const CpbmHyper& hyper,
                         std::vector<double>* loss_history) {
  if (data.rows.empty()) throw FitError("empty intervention-set dataset");
  if (hyper.batch_size < 1 || hyper.epochs < 0) {
    throw ValidationError("batch_size must be >= 1 and epochs >= 0");
  }
  CpbmHyper h = hyper;
  h.k_max = data.k_max;
  CpbmModel model(static_cast<int>(data.rows.front().context.size()), h);
  std::vector<const InterventionRow*> order;
  order.reserve(data.rows.size());
  for (const auto& r : data.rows) order.push_back(&r);
  Rng rng(DeriveSeed(hyper.seed, "cpbm-batches"));
  std::vector<double> grad;
  const std::size_t batch = static_cast<std::size_t>(hyper.batch_size);

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    Shuffle(std::span<const InterventionRow*>(order), rng);
    double running = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      const std::span<const InterventionRow* const> rows(order.data() + start, end - start);
      running += model.LossAndGradient(rows, &grad) * static_cast<double>(rows.size());
      for (std::size_t i = 0; i < grad.size(); ++i) {
        model.params_[i] -= hyper.learning_rate * grad[i];
      }
    }
    double loss = running / static_cast<double>(order.size());
    if (loss_history) {
      loss = model.Loss(data);
      loss_history->push_back(loss);
    }
    if (!std::isfinite(loss)) throw TrainingError(epoch, "CPBM loss is not finite");
  }
  return model;
}

void CpbmModel::CheckInput(std::span<const double> x) const {
  if (x.size() != static_cast<std::size_t>(context_dim_)) {
    throw ValidationError("CPBM expects " + std::to_string(context_dim_) +
                          " context features, got " + std::to_string(x.size()));
  }
}

void CpbmModel::CheckPosition(int k) const {
  if (k < 1 || k > k_max_) {
    throw ValidationError("position " + std::to_string(k) + " outside 1.." +
                          std::to_string(k_max_));
  }
}

double CpbmModel::Propensity(std::span<const double> x, int k) const {
  CheckInput(x);
  CheckPosition(k);
  return Output(exam_.l3, Forward(exam_, x).h2, static_cast<std::size_t>(k - 1));
}

std::vector<double> CpbmModel::Examination(std::span<const double> x) const {
  CheckInput(x);
  const Hidden h = Forward(exam_, x);
  std::vector<double> out(k_max_);
  for (int k = 0; k < k_max_; ++k) out[k] = Output(exam_.l3, h.h2, k);
  return out;
}

double CpbmModel::Relevance(std::span<const double> x, int a, int b) const {
  CheckInput(x);
  CheckPosition(a);
  CheckPosition(b);
  const Hidden h = Forward(rel_, x);
  const auto k = static_cast<std::size_t>(k_max_);
  const auto i = static_cast<std::size_t>(a - 1), j = static_cast<std::size_t>(b - 1);
  return 0.5 * (Output(rel_.l3, h.h2, i * k + j) + Output(rel_.l3, h.h2, j * k + i));
}

std::vector<double> CpbmModel::RelevanceMatrix(std::span<const double> x) const {
  CheckInput(x);
  const Hidden h = Forward(rel_, x);
  const auto k = static_cast<std::size_t>(k_max_);
  std::vector<double> raw(k * k);
  for (std::size_t u = 0; u < raw.size(); ++u) raw[u] = Output(rel_.l3, h.h2, u);
  std::vector<double> out(k * k);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = 0.5 * (raw[i * k + j] + raw[j * k + i]);
  }
  return out;
}

double CpbmModel::Tau(std::span<const double> x, int k) const {
  CheckPosition(k);
  if (k == 1) return 0.0;
  const auto exam = Examination(x);
  return exam[0] * Relevance(x, 1, k) - exam[k - 1] * Relevance(x, k, 1);
}

nlohmann::json CpbmModel::ToJson() const {
  return {{"format", "cfltr-cpbm"}, {"version", kFormatVersion},
          {"context_dim", context_dim_}, {"hidden1", hidden1_},
          {"hidden2", hidden2_},        {"k_max", k_max_},
          {"parameters", params_}};
}

CpbmModel CpbmModel::FromJson(const nlohmann::json& j) {
  if (j.value("format", "") != "cfltr-cpbm" || j.value("version", 0) != kFormatVersion) {
    throw ValidationError("not a version 1 CPBM document");
  }
  CpbmModel m;
  m.Layout(j.at("context_dim").get<int>(), j.at("hidden1").get<int>(),
           j.at("hidden2").get<int>(), j.at("k_max").get<int>());
  auto params = j.at("parameters").get<std::vector<double>>();
  if (params.size() != m.params_.size()) {
    throw ValidationError("CPBM parameter count does not match its layout");
  }
  m.params_ = std::move(params);
  return m;
}

}  // namespace cfltr
