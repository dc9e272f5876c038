"""Two-stage least squares with a discrete instrument (Poly2SLS).

Stage 1 regresses the treatment on instrument dummies, polynomial covariate
features and dummy-by-covariate interactions. Stage 2 regresses the outcome on
powers of the fitted treatment and the same covariate features. The treatment
effect ``g(t, x) - g(0, x)`` then only involves the treatment powers.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from .dataset import Dataset, true_ite

log = logging.getLogger(__name__)

RANK_TOL = 1e-9


class RankDeficiencyError(np.linalg.LinAlgError):
    def __init__(self, columns):
        super().__init__(f"design is rank deficient; dependent columns: {', '.join(columns)}")
        self.columns = list(columns)


def poly_design(X: np.ndarray, p: int) -> tuple:
    """Covariate features: powers ``X_j**q`` for ``q <= p`` and, for ``p >= 2``,
    the pairwise products of the first three columns."""
    X = np.asarray(X, dtype=float)
    m = X.shape[1]
    cols, names = [], []
    for q in range(1, p + 1):
        for j in range(m):
            cols.append(X[:, j] ** q)
            names.append(f"X{j + 1}" if q == 1 else f"X{j + 1}^{q}")
    if p >= 2:
        lead = min(m, 3)
        for a in range(lead):
            for b in range(a + 1, lead):
                cols.append(X[:, a] * X[:, b])
                names.append(f"X{a + 1}*X{b + 1}")
    if not cols:
        return np.empty((len(X), 0)), []
    return np.column_stack(cols), names


def lstsq_checked(A: np.ndarray, y: np.ndarray, names, tol: float = RANK_TOL, strict: bool = False):
    """Least squares with an explicit rank check.

    A Householder QR flags every column that is numerically spanned by the
    columns before it. Full-rank designs are solved from that QR; otherwise the
    minimum-norm solution (SVD) is returned, which is the vanishing-ridge limit
    and leaves fitted values equal to the exact projection. Returns
    ``(coef, dependent_column_names)``; ``strict=True`` raises instead.
    """
    A = np.asarray(A, dtype=float)
    norms = np.linalg.norm(A, axis=0)
    Q, R = np.linalg.qr(A)
    diag = np.abs(np.diag(R))
    dependent = [names[j] for j in np.flatnonzero(diag <= tol * np.maximum(norms, 1e-300))]
    if not dependent:
        return solve_triangular(R, Q.T @ y, check_finite=False), []
    if strict:
        raise RankDeficiencyError(dependent)
    log.info("rank-deficient design, dependent columns: %s", ", ".join(dependent))
    return np.linalg.lstsq(A, y, rcond=None)[0], dependent


def _dummies(z, levels):
    # reference coding: the first level is absorbed by the intercept
    return np.column_stack([(z == lv).astype(float) for lv in levels[1:]]) if len(levels) > 1 \
        else np.empty((len(z), 0))


@dataclass
class TwoStageModel:
    levels: list
    p: int
    treatment_degree: int
    interactions: bool
    stage1_coef: np.ndarray
    stage1_columns: list
    stage2_coef: np.ndarray
    stage2_columns: list
    dependent: dict = field(default_factory=dict)
    first_stage_r2: float = float("nan")

    @property
    def treatment_coef(self) -> np.ndarray:
        """Stage-2 coefficients on ``t, t**2, ...``."""
        return self.stage2_coef[1:1 + self.treatment_degree]

    def stage1_design(self, X, z, extra=None) -> np.ndarray:
        return _stage1_design(X, z, self.levels, self.p, self.interactions, extra)[0]

    def g_hat(self, t, X, extra=None) -> np.ndarray:
        """Fitted structural function (up to the alignment constant)."""
        t = np.asarray(t, dtype=float)
        F, _ = _covariate_block(np.asarray(X, dtype=float), self.p, extra)
        D = np.column_stack([np.ones(len(t))] + [t ** q for q in range(1, self.treatment_degree + 1)] + [F])
        return D @ self.stage2_coef

    def to_json(self) -> dict:
        return {"levels": [int(v) for v in self.levels], "p": self.p,
                "treatment_degree": self.treatment_degree, "interactions": self.interactions,
                "stage1": dict(zip(self.stage1_columns, self.stage1_coef.tolist())),
                "stage2": dict(zip(self.stage2_columns, self.stage2_coef.tolist())),
                "dependent": self.dependent, "first_stage_r2": self.first_stage_r2}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")


def _covariate_block(X, p, extra):
    F, names = poly_design(X, p)
    if extra is not None:
        extra = np.asarray(extra, dtype=float).reshape(len(X), -1)
        F = np.hstack([F, extra])
        names = names + [f"extra{j + 1}" for j in range(extra.shape[1])]
    return F, names


def _stage1_design(X, z, levels, p, interactions, extra=None):
    X = np.asarray(X, dtype=float)
    n = len(X)
    Dz = _dummies(z, levels)
    F, fnames = _covariate_block(X, p, extra)
    blocks = [np.ones((n, 1)), Dz, F]
    names = ["1"] + [f"z={lv + 1}" for lv in levels[1:]] + fnames
    if interactions and Dz.shape[1]:
        for a, lv in enumerate(levels[1:]):
            blocks.append(Dz[:, [a]] * X)
            names += [f"z={lv + 1}*X{j + 1}" for j in range(X.shape[1])]
    return np.column_stack(blocks), names


def fit_2sls(X, T, Y, z=None, p: int = 2, treatment_degree: int = 2, interactions: bool = True,
             strict: bool = False, extra=None) -> TwoStageModel:
    """Fit both stages. ``z=None`` (or a constant) gives the no-instrument baseline.

    ``extra`` holds additional exogenous covariate columns used in both stages.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    T = np.asarray(T, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = len(T)
    z = np.zeros(n, dtype=int) if z is None else np.asarray(z, dtype=int)
    if len(z) != n:
        raise ValueError("instrument length does not match the data")
    levels = sorted(int(v) for v in np.unique(z))
    if not levels:
        raise ValueError("instrument has no levels")

    D1, names1 = _stage1_design(X, z, levels, p, interactions, extra)
    if n <= D1.shape[1]:
        raise ValueError(f"n={n} does not exceed the stage-1 design width {D1.shape[1]}")
    c1, dep1 = lstsq_checked(D1, T, names1, strict=strict)
    T_hat = D1 @ c1
    r2 = 1.0 - np.sum((T - T_hat) ** 2) / max(np.sum((T - T.mean()) ** 2), 1e-300)

    F, fnames = _covariate_block(X, p, extra)
    D2 = np.column_stack([np.ones(n)] + [T_hat ** q for q in range(1, treatment_degree + 1)] + [F])
    names2 = ["1"] + ["t" if q == 1 else f"t^{q}" for q in range(1, treatment_degree + 1)] + fnames
    if n <= D2.shape[1]:
        raise ValueError(f"n={n} does not exceed the stage-2 design width {D2.shape[1]}")
    c2, dep2 = lstsq_checked(D2, Y, names2, strict=strict)
    dependent = {k: v for k, v in (("stage1", dep1), ("stage2", dep2)) if v}
    return TwoStageModel(levels, p, treatment_degree, interactions, c1, names1, c2, names2,
                         dependent, float(r2))


def fit_dataset(dataset: Dataset, z=None, **kw) -> TwoStageModel:
    return fit_2sls(dataset.X, dataset.T, dataset.Y, z, **kw)


@dataclass
class ItePrediction:
    t: np.ndarray
    tau_hat: np.ndarray


def predict_ite(model: TwoStageModel, t, X=None) -> ItePrediction:
    """``g_hat(t, x) - g_hat(0, x)``; intercept and covariate terms cancel, so
    ``X`` does not enter."""
    t = np.asarray(t, dtype=float)
    tau = np.zeros_like(t)
    for q, b in enumerate(model.treatment_coef, start=1):
        tau = tau + b * t ** q
    return ItePrediction(t, tau)


def treatment_points(test: Dataset, policy: str = "observed", grid_size: int = 50) -> np.ndarray:
    if policy == "observed":
        return test.T
    if policy == "grid":
        lo, hi = np.quantile(test.T, [0.05, 0.95])
        return np.linspace(lo, hi, grid_size)
    raise ValueError(f"unknown treatment policy {policy!r}")


def ite_mse(model: TwoStageModel, test: Dataset, policy: str = "observed") -> float:
    """Mean squared ITE error over the test units at ``T = do(t)``."""
    t = treatment_points(test, policy)
    if test.synthetic:
        truth = true_ite(t)
    elif policy == "observed" and test.ite is not None:
        truth = test.ite
    else:
        raise ValueError("test data carries no ground-truth treatment effect")
    err = predict_ite(model, t).tau_hat - truth
    return float(np.mean(err ** 2))


def write_predictions(model: TwoStageModel, test: Dataset, path, policy: str = "observed") -> None:
    t = treatment_points(test, policy)
    tau = predict_ite(model, t).tau_hat
    truth = true_ite(t) if test.synthetic else (test.ite if test.ite is not None else None)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "tau_hat", "tau_true", "sq_error"])
        for i in range(len(t)):
            if truth is None:
                w.writerow([repr(float(t[i])), repr(float(tau[i])), "", ""])
            else:
                w.writerow([repr(float(t[i])), repr(float(tau[i])), repr(float(truth[i])),
                            repr(float((tau[i] - truth[i]) ** 2))])
