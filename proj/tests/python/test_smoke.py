import math
import os

import numpy as np
import pytest

import cfltr

TINY = {
    "corpus": {
        "synthetic": {
            "n_queries": 60,
            "docs_per_query": 10,
            "feature_dim": 6,
            "n_informative": 3,
        }
    },
    "n_context_features": 3,
    "avg_searches_per_query": [4],
    "pct_training_queries": [1.0],
    "n_runs": 1,
    "ltr": {"epochs": 10},
    "cpbm": {"epochs": 20},
    "causal_forest": {"n_trees": 15},
    "x_learner": {"n_trees": 10},
    "feature_importance": {"n_trees": 10},
}


def test_click_model_closed_form():
    params = cfltr.ClickModelParams.draw(3, seed=7)
    x = [0.2, 0.5, 0.9]
    wx = 1.0 + sum(w * v for w, v in zip(params.w, x))
    for k in range(1, 11):
        exam = k ** -max(wx, 0.0)
        assert cfltr.examination_prob(x, k, params) == pytest.approx(exam, abs=1e-12)
        assert cfltr.click_prob(x, k, 0, params) == pytest.approx(0.1 * exam, abs=1e-12)
        tau = cfltr.true_tau(x, 1, k, params)
        assert tau == pytest.approx(1.0 - exam, abs=1e-12)


def test_invalid_position_raises():
    params = cfltr.ClickModelParams.draw(2, seed=1)
    with pytest.raises(cfltr.Error):
        cfltr.examination_prob([0.1, 0.2], 0, params)


def test_causal_forest_recovers_step_effect():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(2000, 3))
    t = rng.integers(0, 2, size=2000)
    y = 0.1 * x[:, 1] + t * np.where(x[:, 0] > 0.5, 0.4, 0.0)
    config = cfltr.ForestConfig()
    config.n_trees = 50
    config.seed = 1
    forest = cfltr.CausalForest.fit(x, y, t, config)
    probe = np.array([[0.2, 0.5, 0.5], [0.8, 0.5, 0.5]])
    pred = forest.predict(probe)
    assert pred.shape == (2,)
    assert pred[0] == pytest.approx(0.0, abs=0.05)
    assert pred[1] == pytest.approx(0.4, abs=0.05)
    assert forest.n_trees == 50

    learner = cfltr.XLearner.fit(x, y, t)
    assert learner.predict(probe)[1] == pytest.approx(0.4, abs=0.08)


def test_difference_of_means_and_empty_arm():
    assert cfltr.difference_of_means([1.0, 3.0, 2.0], [1, 1, 0]) == pytest.approx(0.0)
    with pytest.raises(cfltr.FitError):
        cfltr.difference_of_means([1.0, 2.0], [1, 1])


def test_ranking_metrics():
    assert cfltr.dcg([1, 1]) == pytest.approx(1.0 + 1.0 / math.log2(3))
    assert cfltr.ndcg([1, 0, 1]) == pytest.approx(1.5 / (1.0 + 1.0 / math.log2(3)))
    assert cfltr.ndcg([0, 0]) == 0.0
    t, df, p = cfltr.welch_t_test([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
    assert t == pytest.approx(-1.0)
    assert df == pytest.approx(8.0)
    assert p == pytest.approx(0.3466, abs=1e-3)


def test_run_experiment_and_plot_data(tmp_path):
    defaults = cfltr.default_config()
    assert "methods" in defaults
    rows = cfltr.run_experiment(TINY, str(tmp_path))
    assert [r["method"] for r in rows] == defaults["methods"]
    for row in rows:
        assert row["error"] == ""
        assert 0.0 <= row["ndcg10"] <= 1.0
    path = cfltr.emit_plot_data(str(tmp_path), "ndcg_box", str(tmp_path))
    assert os.path.exists(path)
    again = cfltr.run_experiment(TINY)
    assert [r["ndcg10"] for r in again] == [r["ndcg10"] for r in rows]


def test_bad_config_raises():
    with pytest.raises(cfltr.ValidationError):
        cfltr.run_experiment({"n_runs": 0})
