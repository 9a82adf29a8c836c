"""Python bindings for the cfltr counterfactual learning-to-rank library."""

import json

from ._core import (
    CausalForest,
    ClickModelParams,
    Error,
    FitError,
    ForestConfig,
    LookupError,
    ParseError,
    TrainingError,
    ValidationError,
    XLearner,
    click_prob,
    dcg,
    difference_of_means,
    emit_plot_data,
    examination_prob,
    ndcg,
    true_tau,
    welch_t_test,
)
from . import _core


def default_config():
    """Returns the default experiment configuration as a dict."""
    return json.loads(_core.default_config())


def run_experiment(config=None, output_dir=""):
    """Runs the experiment grid.

    `config` is a dict of overrides (see `default_config`). Returns a list of
    dicts, one per (condition, run, method).
    """
    return _core.run_experiment(json.dumps(config or {}), output_dir)


__all__ = [
    "CausalForest",
    "ClickModelParams",
    "Error",
    "FitError",
    "ForestConfig",
    "LookupError",
    "ParseError",
    "TrainingError",
    "ValidationError",
    "XLearner",
    "click_prob",
    "dcg",
    "default_config",
    "difference_of_means",
    "emit_plot_data",
    "examination_prob",
    "ndcg",
    "run_experiment",
    "true_tau",
    "welch_t_test",
]
