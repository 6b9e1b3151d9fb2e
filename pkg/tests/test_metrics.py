import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdkn.autodiff import ParamStore
from sdkn.exceptions import UsageError
from sdkn.model import ActivationKernelLayer, LinearKernelLayer, ModelGraph, build_sdkn, init_params
from sdkn.metrics import (HISTOGRAM_BINS, cross_correlation, evaluate, evaluate_predictions,
                          export_activation_profiles, write_profiles)


def test_correlation_examples():
    x = np.array([1.0, 3.0, 2.0, 5.0])
    assert cross_correlation(x, x) == 1.0
    assert cross_correlation(-x, x) == -1.0
    assert cross_correlation([1, 2, 3], [1, 2, 4]) == pytest.approx(0.98198051, abs=1e-8)
    assert cross_correlation([1, 2, 3], [1, 2, 4]) == pytest.approx(np.sqrt(27 / 28), abs=1e-15)


def test_zero_variance_is_undefined():
    assert cross_correlation([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]) is None


def test_correlation_errors():
    with pytest.raises(UsageError):
        cross_correlation([1.0], [1.0])
    with pytest.raises(UsageError):
        cross_correlation([1.0, 2.0], [1.0, 2.0, 3.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 10), st.floats(-10, 10))
def test_affine_invariance_and_symmetry(seed, a, b):
    r = np.random.default_rng(seed)
    p, t = r.normal(size=20), r.normal(size=20)
    c = cross_correlation(p, t)
    assert abs(cross_correlation(a * p + b, t) - c) < 1e-12
    assert cross_correlation(t, p) == pytest.approx(c, abs=1e-15)


def test_perfect_and_mean_predictors():
    t = np.array([[1.0], [2.0], [4.0], [7.0]])
    r = evaluate_predictions(t.copy(), t)
    assert r.mse == 0.0 and r.cross_correlation == 1.0
    r = evaluate_predictions(np.full_like(t, t.mean()), t)
    assert r.cross_correlation is None
    assert r.mse == pytest.approx(t.var())


def test_report_json_is_stable():
    t = np.arange(6.0).reshape(3, 2)
    a = evaluate_predictions(t + 0.1, t, model_id="m", dataset_id="d", split="test").to_json()
    b = evaluate_predictions(t + 0.1, t, model_id="m", dataset_id="d", split="test").to_json()
    assert a == b and '"split": "test"' in a
    r = evaluate_predictions(t + 0.1, t)
    assert len(r.mse_per_component) == 2 and len(r.cross_correlation_per_component) == 2


def test_evaluate_empty_split():
    g = ModelGraph([LinearKernelLayer(1, 1)])
    with pytest.raises(UsageError):
        evaluate(g, ParamStore({"0.W": [[1.0]]}), np.zeros((0, 1)), np.zeros((0, 1)))


def _single(a, c):
    g = ModelGraph([ActivationKernelLayer(1, 1), LinearKernelLayer(1, 1)])
    return g, ParamStore({"0.C": [[c]], "0.A": [[a]], "1.W": [[1.0]]})


def test_profiles_examples():
    grid = np.linspace(-2, 2, 9)
    g, zero = _single(0.0, 0.0)
    _, one = _single(1.0, 0.0)
    X = np.linspace(-1, 1, 30)[:, None]
    (prof,) = export_activation_profiles(g, zero, one, X, grid=grid)
    np.testing.assert_array_equal(prof.before, 0.0)
    np.testing.assert_allclose(prof.after, np.exp(-grid ** 2), rtol=1e-15)
    assert prof.hist_counts.sum() == 30 and len(prof.hist_counts) == HISTOGRAM_BINS


def test_profiles_written_as_csv(tmp_path, rng):
    g = build_sdkn(1, (3, 2), 1)
    X = rng.normal(size=(40, 1))
    p = init_params(g, 0, X)
    profiles = export_activation_profiles(g, p, p, X, n_grid=11)
    paths = write_profiles(profiles, tmp_path)
    assert sorted(q.name for q in paths) == sorted(
        ["layer_1_dim_0.csv", "layer_1_dim_1.csv", "layer_1_dim_2.csv",
         "layer_3_dim_0.csv", "layer_3_dim_1.csv"])
    rows = list(csv.reader(open(paths[0])))
    assert rows[0] == ["grid", "before", "after", "hist_left_edge", "hist_count"]
    assert len(rows) == 1 + HISTOGRAM_BINS
    assert rows[1][1] == rows[1][2]
