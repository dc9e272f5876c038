import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metaem.dataset import (SCENARIOS, DataError, Dataset, Schema, ScenarioSpec, encode_labels,
                            generate, generate_test, load, load_csv, save, scenario_fx, true_ite)


def test_true_ite_values():
    assert true_ite(0.0) == 0.0
    assert true_ite(1.0) == pytest.approx(-0.6, abs=1e-15)
    assert true_ite(2.0) == pytest.approx(0.6, abs=1e-15)


def test_linear_3_3_shapes_and_group_frequencies():
    data = generate(ScenarioSpec("linear", k_true=3, m_x=3, n=3000, sigma_xe=0.1, seed=7))
    assert data.X.shape == (3000, 3)
    assert set(np.unique(data.z_true)) == {0, 1, 2}
    counts = np.bincount(data.z_true, minlength=3)
    p = 1 / 3
    bound = 3 * np.sqrt(3000 * p * (1 - p))
    assert np.all(np.abs(counts - 3000 * p) <= bound)


def test_zero_sigma_decorrelates_covariates_and_confounder():
    data = generate(ScenarioSpec("linear", 3, 3, n=3000, sigma_xe=0.0, seed=3))
    for j in range(3):
        r = np.corrcoef(data.X[:, j], data.eps)[0, 1]
        assert abs(r) <= 0.06


def test_within_group_slope_matches_closed_form():
    # f(X) = X doubles the weight; the confounder adds 0.2 * Cov(X, eps) = 0.2 * sigma
    spec = ScenarioSpec("linear", k_true=2, m_x=1, n=100_000, sigma_xe=0.1, seed=11)
    data = generate(spec)
    w = np.array(data.meta["w"])
    for k in range(2):
        mask = data.z_true == k
        x, t = data.X[mask, 0], data.T[mask]
        slope = np.polyfit(x, t, 1)[0]
        assert slope == pytest.approx(2 * w[k, 0] + 0.2 * spec.sigma_xe, abs=0.02)


def test_generation_is_deterministic():
    spec = ScenarioSpec("sin", 3, 4, n=500, seed=5)
    a, b = generate(spec), generate(spec)
    for name in ("X", "T", "Y", "z_true", "eps"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_test_set_shares_mechanism_but_not_units():
    spec = ScenarioSpec("linear", 3, 3, n=400, seed=2)
    train, test = generate(spec), generate_test(spec)
    assert train.meta["w"] == test.meta["w"]
    assert not np.array_equal(train.X, test.X)


def test_covariate_means_do_not_depend_on_group():
    data = generate(ScenarioSpec("poly", 3, 3, n=3000, seed=1))
    pooled = data.X.std(axis=0)
    overall = data.X.mean(axis=0)
    for k in range(3):
        members = data.X[data.z_true == k]
        assert np.all(np.abs(members.mean(axis=0) - overall) <= 4 * pooled / np.sqrt(len(members)))


@pytest.mark.parametrize("kind", SCENARIOS)
def test_noiseless_treatment_is_the_deterministic_sum(kind):
    spec = ScenarioSpec(kind, 3, 3, n=200, seed=4, noise_t=0.0, noise_y=0.0, confounder=False)
    data = generate(spec)
    w = np.array(data.meta["w"])
    expected = np.sum((data.X + scenario_fx(kind, data.X)) * w[data.z_true], axis=1)
    np.testing.assert_allclose(data.T, expected, rtol=0, atol=1e-13)
    assert np.all(data.eps == 0)


def test_small_covariate_dimension_clamps_interaction_columns():
    data = generate(ScenarioSpec("linear", 2, 1, n=50, seed=0, noise_y=0.0))
    x = data.X[:, 0]
    structural = -1.5 * data.T + 0.9 * data.T ** 2 + x + np.abs(x * x) - np.sin(10 + x * x)
    np.testing.assert_allclose(data.Y - structural, 2 * data.eps, atol=1e-12)


@pytest.mark.parametrize("kwargs", [dict(k_true=1), dict(n=0), dict(m_x=0), dict(kind="cubic"),
                                    dict(sigma_xe=0.7, m_x=3)])
def test_invalid_specs_are_rejected(kwargs):
    with pytest.raises(DataError):
        generate(ScenarioSpec(**kwargs))


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 6), sigma=st.floats(-0.99, 0.99))
def test_positive_definiteness_rule(m, sigma):
    spec = ScenarioSpec(m_x=m, sigma_xe=sigma)
    ok = m * sigma ** 2 < 1 - 1e-9
    if ok:
        spec.validate()
    elif m * sigma ** 2 > 1 + 1e-9:
        with pytest.raises(DataError):
            spec.validate()


def test_dataset_rejects_bad_input():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), np.zeros(2), np.zeros(3))
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1)), [0.0, np.nan], [0.0, 0.0])
    with pytest.raises(DataError):
        Dataset(np.zeros((0, 1)), [], [])


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def test_load_csv_basic(tmp_path):
    p = _write(tmp_path / "d.csv", "X1,X2,T,Y\n1,2,3,4\n5,6,7,8\n9,10,11,12\n")
    data = load_csv(p, Schema(x=["X1", "X2"]))
    assert data.n == 3 and data.m_x == 2
    assert data.z_true is None
    np.testing.assert_array_equal(data.T, [3, 7, 11])


def test_load_csv_with_labels(tmp_path):
    p = _write(tmp_path / "d.csv", "X1,T,Y,z\n1,2,3,b\n4,5,6,a\n7,8,9,b\n")
    data = load_csv(p, Schema(x=["X1"], z="z"))
    assert data.k_true == 2
    np.testing.assert_array_equal(data.z_true, [1, 0, 1])


def test_load_csv_blank_cell_names_row_and_column(tmp_path):
    p = _write(tmp_path / "d.csv", "X1,T,Y\n1,2,3\n4,5,\n")
    with pytest.raises(DataError, match=r"row 3, column 'Y'"):
        load_csv(p, Schema(x=["X1"]))


def test_load_csv_errors(tmp_path):
    with pytest.raises(DataError, match="missing column"):
        load_csv(_write(tmp_path / "a.csv", "X1,T\n1,2\n"), Schema(x=["X1"]))
    with pytest.raises(DataError, match="non-numeric"):
        load_csv(_write(tmp_path / "b.csv", "X1,T,Y\n1,x,3\n"), Schema(x=["X1"]))
    with pytest.raises(DataError, match="empty file"):
        load_csv(_write(tmp_path / "c.csv", ""), Schema(x=["X1"]))
    with pytest.raises(DataError, match="not found"):
        load_csv(tmp_path / "nope.csv", Schema(x=["X1"]))


def test_encode_labels_numeric_order():
    np.testing.assert_array_equal(encode_labels(["10", "2", "2", "1"]), [2, 1, 1, 0])


def test_save_load_roundtrip(tmp_path):
    data = generate(ScenarioSpec("abs", 3, 2, n=120, seed=9))
    save(data, tmp_path / "d")
    back = load(tmp_path / "d")
    for name in ("X", "T", "Y", "z_true", "eps", "ite"):
        assert np.array_equal(getattr(back, name), getattr(data, name)), name
    assert back.meta["w"] == data.meta["w"]
    assert back.synthetic
    with open(tmp_path / "d" / "data.csv") as fh:
        header = fh.readline().strip().split(",")
        first = fh.readline().strip().split(",")
    assert header == ["X1", "X2", "T", "Y", "z", "eps", "ite"]
    assert int(first[4]) == data.z_true[0] + 1
    with open(tmp_path / "d" / "meta.json") as fh:
        assert json.load(fh)["spec"]["seed"] == 9


def test_save_is_byte_deterministic(tmp_path):
    spec = ScenarioSpec("linear", 3, 3, n=100, seed=7)
    save(generate(spec), tmp_path / "a")
    save(generate(spec), tmp_path / "b")
    for name in ("data.csv", "meta.json"):
        with open(os.path.join(tmp_path, "a", name), "rb") as fa, open(os.path.join(tmp_path, "b", name), "rb") as fb:
            assert fa.read() == fb.read()


def test_load_missing_directory(tmp_path):
    with pytest.raises(DataError):
        load(tmp_path / "missing")
