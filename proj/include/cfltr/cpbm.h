#ifndef CFLTR_CPBM_H_
#define CFLTR_CPBM_H_

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cfltr/clicksim.h"
#include "json.hpp"

namespace cfltr {

// A unique (query, document) pair displayed at two or more positions.
struct InterventionRow {
  std::string query_id;
  int doc_index = 0;
  std::vector<double> context;
  std::vector<int> positions;       // Ascending, 1-based.
  std::vector<double> click_rates;  // Aligned with positions.
  std::vector<int> impressions;     // Aligned with positions.
  // The two most frequently observed positions (ties toward the lower one),
  // stored ascending. Selects the relevance entry the row trains.
  std::pair<int, int> intervention_pair{1, 2};
};

struct InterventionSetDataset {
  int k_max = 10;
  std::vector<InterventionRow> rows;
};

// Merges clicks from all arms and keeps pairs seen at >= 2 distinct positions.
// Throws FitError when no pair qualifies.
InterventionSetDataset BuildCpbmDataset(std::span<const ImpressionRecord> log,
                                        int k_max = 10);

struct CpbmHyper {
  int hidden1 = 32;
  int hidden2 = 16;
  double learning_rate = 0.05;
  int epochs = 200;
  int batch_size = 256;
  std::uint64_t seed = 0;
  int k_max = 10;
};

// Contextual position-based model. The examination net maps a context to K
// sigmoid outputs f_p(x, k); the relevance net maps it to a K x K sigmoid
// grid averaged with its transpose, f_r(x, k, k'). Both nets have two tanh
// hidden layers. All parameters live in one flat vector.
class CpbmModel {
 public:
  CpbmModel() = default;
  // Glorot-uniform initialization from `hyper.seed`.
  CpbmModel(int context_dim, const CpbmHyper& hyper);

  // Minimizes the product cross-entropy with mini-batch gradient descent.
  // Appends the full-dataset mean loss after each epoch to `loss_history`
  // when given. Throws TrainingError on a non-finite loss.
  static CpbmModel Fit(const InterventionSetDataset& data, const CpbmHyper& hyper,
                       std::vector<double>* loss_history = nullptr);

  // f_p(x, k) for k in {1..K}.
  double Propensity(std::span<const double> x, int k) const;
  std::vector<double> Examination(std::span<const double> x) const;
  // f_r(x, a, b); symmetric in (a, b).
  double Relevance(std::span<const double> x, int a, int b) const;
  // Row-major K x K.
  std::vector<double> RelevanceMatrix(std::span<const double> x) const;

  // f_p(x,1) f_r(x,1,k) - f_p(x,k) f_r(x,k,1); 0 for k = 1.
  double Tau(std::span<const double> x, int k) const;

  // Mean per-row loss over `rows`; accumulates the gradient of that mean
  // into `grad` (resized to num_parameters()) when non-null.
  double LossAndGradient(std::span<const InterventionRow* const> rows,
                         std::vector<double>* grad) const;
  double Loss(const InterventionSetDataset& data) const;

  std::span<const double> parameters() const { return params_; }
  std::span<double> mutable_parameters() { return params_; }
  std::size_t num_parameters() const { return params_.size(); }
  int context_dim() const { return context_dim_; }
  int k_max() const { return k_max_; }

  nlohmann::json ToJson() const;
  static CpbmModel FromJson(const nlohmann::json& j);

 private:
  struct Layer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t offset = 0;  // Weights (out x in) then biases (out).
  };
  struct Net {
    Layer l1, l2, l3;
  };
  struct Hidden {
    std::vector<double> h1, h2;
  };

  void Layout(int context_dim, int hidden1, int hidden2, int k_max);
  Hidden Forward(const Net& net, std::span<const double> x) const;
  double Output(const Layer& layer, const std::vector<double>& h2, std::size_t unit) const;
  void Backward(const Net& net, std::span<const double> x, const Hidden& hidden,
                std::span<const std::pair<std::size_t, double>> output_grads,
                std::vector<double>& grad) const;
  void CheckInput(std::span<const double> x) const;
  void CheckPosition(int k) const;

  int context_dim_ = 0;
  int hidden1_ = 0;
  int hidden2_ = 0;
  int k_max_ = 0;
  Net exam_;
  Net rel_;
  std::vector<double> params_;
};

}  // namespace cfltr

#endif  // CFLTR_CPBM_H_
