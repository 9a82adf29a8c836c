#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "cfltr/clicksim.h"
#include "cfltr/errors.h"
#include "cfltr/eval.h"
#include "cfltr/experiment.h"
#include "cfltr/forest.h"
#include "cfltr/hte.h"

namespace py = pybind11;

namespace cfltr {
namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IntArray = py::array_t<int, py::array::c_style | py::array::forcecast>;

Matrix ToMatrix(const DoubleArray& a) {
  if (a.ndim() != 2) throw ValidationError("expected a 2-d feature array");
  Matrix m;
  const auto view = a.unchecked<2>();
  for (py::ssize_t r = 0; r < view.shape(0); ++r) {
    m.AppendRow(std::span<const double>(view.data(r, 0), view.shape(1)));
  }
  return m;
}

template <typename T, typename A>
std::vector<T> ToVector(const A& a) {
  if (a.ndim() != 1) throw ValidationError("expected a 1-d array");
  return std::vector<T>(a.data(), a.data() + a.size());
}

template <typename Model>
py::array_t<double> PredictAll(const Model& model, const DoubleArray& x) {
  const Matrix m = ToMatrix(x);
  const std::vector<double> out = model.Predict(m);
  return py::array_t<double>(out.size(), out.data());
}

py::dict ReportToDict(const MetricReport& r) {
  py::dict d;
  d["method"] = r.method;
  d["avg_searches"] = r.avg_searches;
  d["pct_queries"] = r.pct_queries;
  d["run"] = r.run;
  d["rmse"] = r.rmse;
  d["rmse_r0"] = r.rmse_r0;
  d["rmse_r1"] = r.rmse_r1;
  d["ndcg10"] = r.ndcg10;
  d["wallclock_s"] = r.wallclock_s;
  d["error"] = r.error;
  return d;
}

}  // namespace
}  // namespace cfltr

PYBIND11_MODULE(_core, m) {
  using namespace cfltr;
  m.doc() = "Counterfactual learning-to-rank core routines";

  auto base_error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", base_error.ptr());
  py::register_exception<ParseError>(m, "ParseError", base_error.ptr());
  py::register_exception<TrainingError>(m, "TrainingError", base_error.ptr());
  py::register_exception<FitError>(m, "FitError", base_error.ptr());
  py::register_exception<LookupError>(m, "LookupError", base_error.ptr());

  py::class_<ClickModelParams>(m, "ClickModelParams")
      .def(py::init<>())
      .def_static("draw", &ClickModelParams::Draw, py::arg("context_dim"), py::arg("seed"),
                  py::arg("k_max") = 10, py::arg("noise_click_prob") = 0.1)
      .def_readwrite("w", &ClickModelParams::w)
      .def_readwrite("k_max", &ClickModelParams::k_max)
      .def_readwrite("noise_click_prob", &ClickModelParams::noise_click_prob);

  m.def(
      "examination_prob",
      [](const std::vector<double>& x, int k, const ClickModelParams& p) {
        p.Validate();
        return ExaminationProb(x, k, p);
      },
      py::arg("x"), py::arg("k"), py::arg("params"));
  m.def(
      "click_prob",
      [](const std::vector<double>& x, int k, int rel, const ClickModelParams& p) {
        p.Validate();
        return ClickProb(x, k, rel, p);
      },
      py::arg("x"), py::arg("k"), py::arg("binary_rel"), py::arg("params"));
  m.def(
      "true_tau",
      [](const std::vector<double>& x, int rel, int k, const ClickModelParams& p) {
        return TrueTauOracle::TrueTau(x, rel, k, p);
      },
      py::arg("x"), py::arg("binary_rel"), py::arg("k"), py::arg("params"));

  py::class_<ForestConfig>(m, "ForestConfig")
      .def(py::init<>())
      .def_static("regression_defaults", &ForestConfig::RegressionDefaults)
      .def_readwrite("n_trees", &ForestConfig::n_trees)
      .def_readwrite("max_depth", &ForestConfig::max_depth)
      .def_readwrite("min_leaf", &ForestConfig::min_leaf)
      .def_readwrite("min_leaf_per_arm", &ForestConfig::min_leaf_per_arm)
      .def_readwrite("subsample_fraction", &ForestConfig::subsample_fraction)
      .def_readwrite("n_candidate_features", &ForestConfig::n_candidate_features)
      .def_readwrite("honest", &ForestConfig::honest)
      .def_readwrite("max_thresholds", &ForestConfig::max_thresholds)
      .def_readwrite("seed", &ForestConfig::seed)
      .def_readwrite("n_threads", &ForestConfig::n_threads);

  py::class_<CausalForest>(m, "CausalForest")
      .def_static(
          "fit",
          [](const DoubleArray& x, const DoubleArray& y, const IntArray& t,
             const ForestConfig& c) {
            return CausalForest::Fit(ToMatrix(x), ToVector<double>(y), ToVector<int>(t), c);
          },
          py::arg("x"), py::arg("y"), py::arg("treatment"), py::arg("config") = ForestConfig())
      .def("predict", &PredictAll<CausalForest>, py::arg("x"))
      .def_property_readonly("global_tau", &CausalForest::global_tau)
      .def_property_readonly("n_trees", [](const CausalForest& f) { return f.trees().size(); });

  py::class_<XLearner>(m, "XLearner")
      .def_static(
          "fit",
          [](const DoubleArray& x, const DoubleArray& y, const IntArray& t,
             const ForestConfig& base, std::optional<double> g) {
            return XLearner::Fit(ToMatrix(x), ToVector<double>(y), ToVector<int>(t), base, g);
          },
          py::arg("x"), py::arg("y"), py::arg("treatment"),
          py::arg("base") = ForestConfig::RegressionDefaults(), py::arg("g") = py::none())
      .def("predict",
           [](const XLearner& model, const DoubleArray& x) {
             const Matrix mat = ToMatrix(x);
             std::vector<double> out(mat.rows());
             for (std::size_t i = 0; i < mat.rows(); ++i) out[i] = model.Predict(mat.row(i));
             return py::array_t<double>(out.size(), out.data());
           },
           py::arg("x"))
      .def_property_readonly("g", &XLearner::g);

  m.def(
      "difference_of_means",
      [](const DoubleArray& y, const IntArray& t) {
        return DifferenceOfMeans(ToVector<double>(y), ToVector<int>(t));
      },
      py::arg("y"), py::arg("treatment"));

  m.def(
      "dcg", [](const std::vector<int>& rel, int cutoff) { return Dcg(rel, cutoff); },
      py::arg("ranked_relevance"), py::arg("cutoff") = 10);
  m.def(
      "ndcg", [](const std::vector<int>& rel, int cutoff) { return QueryNdcg(rel, cutoff); },
      py::arg("ranked_relevance"), py::arg("cutoff") = 10);
  m.def(
      "welch_t_test",
      [](const std::vector<double>& a, const std::vector<double>& b) {
        const WelchResult r = WelchTTest(a, b);
        return py::make_tuple(r.t, r.df, r.p_two_sided);
      },
      py::arg("a"), py::arg("b"), "Returns (t, df, two-sided p).");

  m.def("default_config", [] { return ExperimentConfig().ToJson().dump(); },
        "Default experiment configuration as a JSON string.");
  m.def(
      "run_experiment",
      [](const std::string& config_json, const std::string& output_dir) {
        const auto config = ExperimentConfig::FromJson(nlohmann::json::parse(config_json));
        ExperimentResult result;
        {
          py::gil_scoped_release release;
          result = RunExperiment(config, output_dir);
        }
        py::list rows;
        for (const auto& r : result.rows) rows.append(ReportToDict(r));
        return rows;
      },
      py::arg("config_json"), py::arg("output_dir") = "",
      "Runs the experiment grid and returns one dict per (condition, run, method).");
  m.def("emit_plot_data", &EmitPlotData, py::arg("results_dir"), py::arg("kind"),
        py::arg("out_dir"));
}
