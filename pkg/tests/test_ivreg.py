import csv
import json

import numpy as np
import pytest

from metaem.dataset import Dataset, ScenarioSpec, generate, generate_test, true_ite
from metaem.ivreg import (RankDeficiencyError, fit_2sls, fit_dataset, ite_mse, lstsq_checked, poly_design,
                          predict_ite, treatment_points, write_predictions)


@pytest.fixture(scope="module")
def linear33():
    spec = ScenarioSpec("linear", 3, 3, n=3000, seed=0)
    return generate(spec), generate_test(spec)


def _outcome_terms(X):
    return np.column_stack([np.abs(X[:, 0] * X[:, 1]), np.sin(10 + X[:, 1] * X[:, 2])])


def test_poly_design_columns():
    X = np.arange(6.0).reshape(2, 3)
    F, names = poly_design(X, 2)
    assert names == ["X1", "X2", "X3", "X1^2", "X2^2", "X3^2", "X1*X2", "X1*X3", "X2*X3"]
    np.testing.assert_array_equal(F[1], [3, 4, 5, 9, 16, 25, 12, 15, 20])
    assert poly_design(X[:, :1], 1)[1] == ["X1"]


def test_noiseless_fit_recovers_the_outcome_coefficients_exactly():
    data = generate(ScenarioSpec("linear", 3, 3, n=3000, seed=5, noise_t=0, noise_y=0, confounder=False))
    model = fit_dataset(data, data.z_true, extra=_outcome_terms(data.X))
    np.testing.assert_allclose(model.treatment_coef, [-1.5, 0.9], atol=1e-6)
    assert model.first_stage_r2 == pytest.approx(1.0, abs=1e-12)


def test_predicted_effect_vanishes_at_zero(linear33):
    model = fit_dataset(linear33[0], linear33[0].z_true)
    pred = predict_ite(model, np.zeros(7), linear33[1].X[:7])
    assert np.all(pred.tau_hat == 0.0)


def test_known_coefficients_give_known_effect(linear33):
    model = fit_dataset(linear33[0], linear33[0].z_true)
    model.stage2_coef[1:3] = [-1.5, 0.9]
    assert predict_ite(model, [2.0]).tau_hat[0] == pytest.approx(0.6, abs=1e-15)
    X = linear33[1].X[:5]
    g = model.g_hat(np.full(5, 2.0), X) - model.g_hat(np.zeros(5), X)
    np.testing.assert_allclose(g, 0.6, atol=1e-12)


def test_effect_ignores_outcome_shift(linear33):
    train = linear33[0]
    a = fit_2sls(train.X, train.T, train.Y, train.z_true)
    b = fit_2sls(train.X, train.T, train.Y + 12.5, train.z_true)
    np.testing.assert_allclose(a.treatment_coef, b.treatment_coef, rtol=1e-9, atol=1e-11)


def test_ite_mse_zero_and_offset():
    rng = np.random.default_rng(0)
    n = 200
    X = rng.standard_normal((n, 2))
    z = rng.integers(0, 2, n)
    T = X[:, 0] * np.where(z == 0, 1.0, -1.0) + 0.1 * rng.standard_normal(n)
    Y = true_ite(T) + X[:, 1]
    model = fit_2sls(X, T, Y, z)
    model.stage2_coef[1:3] = [-1.5, 0.9]
    exact = Dataset(X, T, Y, ite=true_ite(T))
    assert ite_mse(model, exact) == 0.0
    shifted = Dataset(X, T, Y, ite=true_ite(T) - 0.1)
    assert ite_mse(model, shifted) == pytest.approx(0.01, abs=1e-12)
    with pytest.raises(ValueError):
        ite_mse(model, Dataset(X, T, Y))


def test_true_instrument_on_linear_3_3(linear33):
    train, test = linear33
    true_iv = ite_mse(fit_dataset(train, train.z_true), test)
    none_iv = ite_mse(fit_dataset(train, None), test)
    assert true_iv <= 0.10
    assert true_iv < none_iv


def test_instrument_relabeling_invariance(linear33):
    train, test = linear33
    a = fit_dataset(train, train.z_true)
    b = fit_dataset(train, np.array([2, 0, 1])[train.z_true])
    Ta = a.stage1_design(train.X, train.z_true) @ a.stage1_coef
    Tb = b.stage1_design(train.X, np.array([2, 0, 1])[train.z_true]) @ b.stage1_coef
    np.testing.assert_allclose(Ta, Tb, atol=1e-9)
    np.testing.assert_allclose(a.treatment_coef, b.treatment_coef, atol=1e-9)


def test_true_groups_are_unconfounded():
    data = generate(ScenarioSpec("linear", 3, 3, n=3000, seed=2))
    for k in range(3):
        r = np.corrcoef((data.z_true == k).astype(float), data.eps)[0, 1]
        assert abs(r) <= 4 / np.sqrt(data.n)


def test_constant_instrument_reduces_to_ols():
    rng = np.random.default_rng(3)
    n = 400
    X = rng.standard_normal((n, 2))
    F, _ = poly_design(X, 2)
    T = F @ rng.standard_normal(F.shape[1]) + 0.5          # T lies in the stage-1 span
    Y = 0.3 * T - 0.2 * T ** 2 + np.sin(X[:, 0]) + 0.1 * rng.standard_normal(n)
    model = fit_2sls(X, T, Y, None)
    D = np.column_stack([np.ones(n), T, T ** 2, F])
    oracle = D @ np.linalg.lstsq(D, Y, rcond=None)[0]
    np.testing.assert_allclose(model.g_hat(T, X), oracle, atol=1e-10)
    assert "stage2" in model.dependent


def test_rank_deficiency_names_columns():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(50)
    A = np.column_stack([np.ones(50), x, 2 * x])
    with pytest.raises(RankDeficiencyError, match="c"):
        lstsq_checked(A, x, ["a", "b", "c"], strict=True)
    coef, dep = lstsq_checked(A, x, ["a", "b", "c"])
    assert dep == ["c"]
    np.testing.assert_allclose(A @ coef, x, atol=1e-12)


def test_strict_fit_reports_collinear_stage():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((100, 1))
    X = np.hstack([X, X])
    with pytest.raises(RankDeficiencyError) as info:
        fit_2sls(X, rng.standard_normal(100), rng.standard_normal(100), rng.integers(0, 2, 100), strict=True)
    assert "X2" in info.value.columns


def test_too_few_rows_and_bad_labels():
    rng = np.random.default_rng(6)
    with pytest.raises(ValueError):
        fit_2sls(rng.standard_normal((8, 3)), np.zeros(8), np.zeros(8), rng.integers(0, 3, 8))
    with pytest.raises(ValueError):
        fit_2sls(rng.standard_normal((20, 1)), np.zeros(20), np.zeros(20), np.zeros(19, int))


def test_treatment_points(linear33):
    test = linear33[1]
    assert np.array_equal(treatment_points(test, "observed"), test.T)
    grid = treatment_points(test, "grid")
    lo, hi = np.quantile(test.T, [0.05, 0.95])
    assert len(grid) == 50 and grid[0] == lo and grid[-1] == hi
    with pytest.raises(ValueError):
        treatment_points(test, "random")


def test_model_and_prediction_files(tmp_path, linear33):
    train, test = linear33
    model = fit_dataset(train, train.z_true)
    model.save(tmp_path / "model.json")
    doc = json.loads((tmp_path / "model.json").read_text())
    assert list(doc["stage2"])[:3] == ["1", "t", "t^2"]
    write_predictions(model, test, tmp_path / "pred.csv")
    with open(tmp_path / "pred.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == test.n
    mse = np.mean([float(r["sq_error"]) for r in rows])
    assert mse == pytest.approx(ite_mse(model, test), rel=1e-12)
