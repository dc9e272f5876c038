"""Shared representation with per-group linear treatment heads.

The model maps covariates ``X`` to ``R = f(X)`` and is trained on

    sum_i (alpha[z_i] . r_i - t_i)^2 + lam * sum_i ||D r_i + c - x_i||^2

where ``alpha`` holds one coefficient row per group and ``(D, c)`` is a linear
decoder back to the covariates. Gradients are written out by hand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MAP_KINDS = ("identity", "poly", "mlp")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int):
        super().__init__(f"representation loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lam: Optional[float] = None  # defaults to 1 / m_x
    learning_rate: float = 1e-2
    epochs: int = 200
    batch_size: int = 256
    seed: int = 0

    def validate(self) -> None:
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def poly_features(X: np.ndarray, degree: int) -> np.ndarray:
    """Per-column monomials ``[X, X**2, ..., X**degree]`` (blocks by degree)."""
    X = np.asarray(X, dtype=float)
    return np.hstack([X ** p for p in range(1, degree + 1)])


@dataclass
class RepresentationModel:
    kind: str
    m_x: int
    m_r: int
    K: int
    params: dict = field(default_factory=dict)
    degree: int = 2
    hidden: int = 0

    @classmethod
    def create(cls, kind: str, m_x: int, K: int, m_r: Optional[int] = None, degree: int = 2,
               hidden: Optional[int] = None, seed: int = 0) -> "RepresentationModel":
        """Initialise parameters uniformly in ``+-1/sqrt(fan_in)``.

        The polynomial mixing matrix starts as the identity on the degree-1
        block (so ``R = X`` initially) and zero elsewhere.
        """
        if kind not in MAP_KINDS:
            raise ValueError(f"unknown map kind {kind!r}")
        m_r = m_x if m_r is None else m_r
        if kind == "identity" and m_r != m_x:
            raise ValueError("identity map requires m_r == m_x")
        hidden = 2 * m_x if hidden is None else hidden
        rng = np.random.default_rng(seed)
        u = lambda fan_in, shape: rng.uniform(-1, 1, size=shape) / np.sqrt(fan_in)
        p = {}
        if kind == "poly":
            W = np.zeros((m_x * degree, m_r))
            if m_r == m_x:
                W[:m_x] = np.eye(m_x)
            else:
                W[:m_x] = u(m_x, (m_x, m_r))
            p["W"], p["b"] = W, np.zeros(m_r)
        elif kind == "mlp":
            p["W1"], p["b1"] = u(m_x, (m_x, hidden)), u(m_x, hidden)
            p["W2"], p["b2"] = u(hidden, (hidden, m_r)), u(hidden, m_r)
        p["alpha"] = u(m_r, (K, m_r))
        p["D"], p["c"] = u(m_r, (m_r, m_x)), np.zeros(m_x)
        return cls(kind, m_x, m_r, K, p, degree, hidden if kind == "mlp" else 0)

    def copy(self) -> "RepresentationModel":
        return RepresentationModel(self.kind, self.m_x, self.m_r, self.K,
                                   {k: v.copy() for k, v in self.params.items()}, self.degree, self.hidden)

    def forward(self, X: np.ndarray) -> np.ndarray:
        return self._forward(X)[0]

    def _forward(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.m_x:
            raise ValueError(f"expected X with {self.m_x} columns, got shape {X.shape}")
        p = self.params
        if self.kind == "identity":
            return X, None
        if self.kind == "poly":
            F = poly_features(X, self.degree)
            return F @ p["W"] + p["b"], F
        H = np.tanh(X @ p["W1"] + p["b1"])
        return H @ p["W2"] + p["b2"], H

    def default_lam(self) -> float:
        return 1.0 / self.m_x

    def loss(self, X, T, z, lam: Optional[float] = None) -> float:
        """Treatment-regression error plus ``lam`` times reconstruction error."""
        lam = self.default_lam() if lam is None else lam
        z = self._check_labels(z)
        R = self.forward(X)
        p = self.params
        e_t = np.einsum("ij,ij->i", R, p["alpha"][z]) - np.asarray(T, dtype=float)
        e_x = R @ p["D"] + p["c"] - X
        return float(e_t @ e_t + lam * np.sum(e_x * e_x))

    def treatment_loss(self, X, T, z) -> float:
        return self.loss(X, T, z, lam=0.0)

    def gradients(self, X, T, z, lam: Optional[float] = None) -> tuple:
        """Loss value and a dict of gradients keyed like ``params``."""
        lam = self.default_lam() if lam is None else lam
        z = self._check_labels(z)
        X = np.asarray(X, dtype=float)
        R, cache = self._forward(X)
        p = self.params
        A = p["alpha"][z]
        e_t = np.einsum("ij,ij->i", R, A) - np.asarray(T, dtype=float)
        e_x = R @ p["D"] + p["c"] - X
        value = float(e_t @ e_t + lam * np.sum(e_x * e_x))

        g = {}
        g["alpha"] = np.eye(self.K)[z].T @ (2.0 * e_t[:, None] * R)
        g["D"] = 2.0 * lam * R.T @ e_x
        g["c"] = 2.0 * lam * e_x.sum(axis=0)
        dR = 2.0 * e_t[:, None] * A + 2.0 * lam * e_x @ p["D"].T
        if self.kind == "poly":
            g["W"] = cache.T @ dR
            g["b"] = dR.sum(axis=0)
        elif self.kind == "mlp":
            H = cache
            g["W2"] = H.T @ dR
            g["b2"] = dR.sum(axis=0)
            dA = (dR @ p["W2"].T) * (1.0 - H * H)
            g["W1"] = X.T @ dA
            g["b1"] = dA.sum(axis=0)
        return value, g

    def _check_labels(self, z):
        z = np.asarray(z, dtype=int)
        if len(z) and (z.min() < 0 or z.max() >= self.K):
            raise ValueError(f"labels must lie in 0..{self.K - 1}")
        return z

    def to_json(self) -> dict:
        return {"map_kind": self.kind, "m_x": self.m_x, "m_r": self.m_r, "K": self.K,
                "degree": self.degree, "hidden": self.hidden,
                "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                           for k, v in self.params.items()}}

    @classmethod
    def from_json(cls, doc: dict) -> "RepresentationModel":
        params = {k: np.array(v["values"], dtype=float).reshape(v["shape"])
                  for k, v in doc["params"].items()}
        return cls(doc["map_kind"], doc["m_x"], doc["m_r"], doc["K"], params,
                   doc.get("degree", 2), doc.get("hidden", 0))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)
            fh.write("\n")


def train(model: RepresentationModel, X, T, z, cfg: TrainConfig = TrainConfig()) -> tuple:
    """Mini-batch gradient descent with the labels held fixed.

    Each step moves along the gradient of the batch loss divided by the batch
    size, so the learning rate does not depend on ``batch_size``. Returns a
    new model and the full-data loss after every epoch (first entry: before
    training).
    """
    cfg.validate()
    model = model.copy()
    X = np.asarray(X, dtype=float)
    T = np.asarray(T, dtype=float)
    z = model._check_labels(z)
    lam = model.default_lam() if cfg.lam is None else cfg.lam
    n = len(T)
    bs = min(n, cfg.batch_size)
    rng = np.random.default_rng(cfg.seed)
    trace = [model.loss(X, T, z, lam)]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        # overflow shows up as a non-finite loss below, reported with its epoch
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                _, g = model.gradients(X[idx], T[idx], z[idx], lam)
                step = cfg.learning_rate / len(idx)
                for key, grad in g.items():
                    model.params[key] -= step * grad
            value = model.loss(X, T, z, lam)
        if not np.isfinite(value):
            raise TrainingDivergedError(epoch)
        trace.append(value)
    return model, trace


def grad_check(model: RepresentationModel, X, T, z, lam: Optional[float] = None,
               step: float = 1e-5, floor: float = 1e-4) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The relative error of each entry is ``|a - f| / max(|a|, |f|, floor)``; the
    floor keeps entries whose true gradient is zero from dividing round-off
    by zero.
    """
    _, analytic = model.gradients(X, T, z, lam)
    probe = model.copy()
    worst = 0.0
    for key, grad in analytic.items():
        theta = probe.params[key]
        flat = theta.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = probe.loss(X, T, z, lam)
            flat[j] = orig - step
            down = probe.loss(X, T, z, lam)
            flat[j] = orig
            numeric = (up - down) / (2 * step)
            a = grad.reshape(-1)[j]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst
