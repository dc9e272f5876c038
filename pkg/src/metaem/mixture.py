"""Gaussian-mixture EM over the joint treatment/representation space.

The rows of ``C`` are ``c_i = (t_i, r_i)``: column 0 holds the treatment and
the remaining columns the representation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

COV_FLOOR = 1e-6
EMPTY_MASS = 1e-8


class SingularCovarianceError(np.linalg.LinAlgError):
    def __init__(self, component: int):
        super().__init__(f"covariance of component {component} is not positive definite")
        self.component = component


@dataclass
class MixtureModel:
    pi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    reseeded: tuple = ()
    tied: bool = False  # all components share the representation block

    @property
    def K(self) -> int:
        return len(self.pi)

    @property
    def d(self) -> int:
        return self.mu.shape[1]

    def permute(self, order) -> "MixtureModel":
        order = np.asarray(order)
        return MixtureModel(self.pi[order], self.mu[order], self.sigma[order], tied=self.tied)

    def to_json(self) -> dict:
        return {"K": self.K, "d": self.d, "pi": self.pi.tolist(), "mu": self.mu.tolist(),
                "sigma": self.sigma.reshape(self.K, -1).tolist(), "tied": self.tied}

    @classmethod
    def from_json(cls, doc: dict) -> "MixtureModel":
        K, d = doc["K"], doc["d"]
        return cls(np.array(doc["pi"], dtype=float), np.array(doc["mu"], dtype=float).reshape(K, d),
                   np.array(doc["sigma"], dtype=float).reshape(K, d, d), tied=doc.get("tied", False))


@dataclass
class Assignment:
    gamma: np.ndarray
    z: Optional[np.ndarray] = None
    mode: str = "sampled"


@dataclass
class FitResult:
    model: MixtureModel
    trace: list
    converged: bool
    reseed_events: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1


def _clip_psd(S: np.ndarray, floor: float) -> np.ndarray:
    S = 0.5 * (S + S.T)
    vals, vecs = np.linalg.eigh(S)
    if vals.min() >= floor:
        return S
    vals = np.maximum(vals, floor)
    S = (vecs * vals) @ vecs.T
    return 0.5 * (S + S.T)


def init_constrained(C: np.ndarray, K: int, seed: int = 0, cross_scale: float = 1.0) -> MixtureModel:
    """Initial parameters sharing the representation moments across components.

    Every component gets the sample mean and covariance of the representation
    block. Treatment means sit at the ``(k - 0.5)/K`` quantiles of ``T``, and
    the treatment/representation cross-covariance is the sample value plus
    seeded Gaussian noise of norm scale ``cross_scale * ||Cov(T, R)||``
    (skipped for ``K = 1``). Groups differ mainly in how treatment co-varies
    with the representation, so the perturbation has to be large enough to
    break that symmetry; 0.1 leaves EM near the split-by-treatment-level optimum.
    """
    C = np.asarray(C, dtype=float)
    n, d = C.shape
    if K < 1:
        raise ValueError("K must be >= 1")
    if n <= d:
        raise ValueError(f"need more rows than columns, got n={n}, d={d}")
    if np.all(C.var(axis=0) == 0):
        raise ValueError("degenerate data: every column has zero variance")
    rng = np.random.default_rng(seed)

    t, R = C[:, 0], C[:, 1:]
    S = np.cov(C, rowvar=False, bias=True).reshape(d, d)
    S_rr = _clip_psd(S[1:, 1:], COV_FLOOR) if d > 1 else S[1:, 1:]
    cross = S[1:, 0]
    var_t = S[0, 0]
    q = np.quantile(t, (np.arange(K) + 0.5) / K)

    mu = np.empty((K, d))
    sigma = np.empty((K, d, d))
    scale = cross_scale * np.linalg.norm(cross)
    for k in range(K):
        c_k = cross + (rng.standard_normal(d - 1) * scale if K > 1 else 0.0)
        mu[k, 0] = q[k]
        mu[k, 1:] = R.mean(axis=0)
        sig = np.empty((d, d))
        sig[1:, 1:] = S_rr
        sig[1:, 0] = c_k
        sig[0, 1:] = c_k
        # keep the shared block intact: restore definiteness through the
        # treatment variance (Schur complement) instead of clipping the whole matrix
        explained = c_k @ np.linalg.solve(S_rr, c_k) if d > 1 else 0.0
        sig[0, 0] = max(var_t, explained + 0.05 * var_t + COV_FLOOR)
        sigma[k] = sig
    return MixtureModel(np.full(K, 1.0 / K), mu, sigma)


def component_log_density(model: MixtureModel, C: np.ndarray) -> np.ndarray:
    """``log N(c_i; mu_k, Sigma_k)`` as an ``n x K`` array."""
    C = np.asarray(C, dtype=float)
    n, d = C.shape
    out = np.empty((n, model.K))
    for k in range(model.K):
        try:
            L = np.linalg.cholesky(model.sigma[k])
        except np.linalg.LinAlgError:
            raise SingularCovarianceError(k) from None
        diff = C - model.mu[k]
        sol = solve_triangular(L, diff.T, lower=True, check_finite=False)
        maha = np.einsum("ij,ij->j", sol, sol)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        out[:, k] = -0.5 * (d * np.log(2.0 * np.pi) + logdet + maha)
    return out


def _tied_log_density(model: MixtureModel, C: np.ndarray) -> np.ndarray:
    """Same values as ``component_log_density`` for a tied model, computed as
    the shared marginal of ``r`` plus each component's conditional of ``t``."""
    n, d = C.shape
    t, R = C[:, 0], C[:, 1:]
    mu_r = model.mu[0, 1:]
    S_rr = model.sigma[0, 1:, 1:]
    try:
        L = np.linalg.cholesky(S_rr)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError(0) from None
    dev = R - mu_r
    sol = solve_triangular(L, dev.T, lower=True, check_finite=False)
    marginal = -0.5 * ((d - 1) * np.log(2.0 * np.pi) + 2.0 * np.log(np.diag(L)).sum()
                       + np.einsum("ij,ij->j", sol, sol))
    B = cho_solve((L, True), model.sigma[:, 1:, 0].T)          # (d-1) x K slopes
    s2 = model.sigma[:, 0, 0] - np.einsum("kj,jk->k", model.sigma[:, 0, 1:], B)
    if np.any(s2 <= 0):
        raise SingularCovarianceError(int(np.argmin(s2)))
    resid = t[:, None] - model.mu[:, 0] - dev @ B
    return marginal[:, None] - 0.5 * (np.log(2.0 * np.pi * s2) + resid ** 2 / s2)


def _weighted_log(model, C):
    C = np.asarray(C, dtype=float)
    dens = _tied_log_density(model, C) if model.tied and C.shape[1] > 1 else component_log_density(model, C)
    with np.errstate(divide="ignore"):
        return dens + np.log(model.pi)


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    top = a.max(axis=1, keepdims=True)
    top[~np.isfinite(top)] = 0.0
    return (top + np.log(np.exp(a - top).sum(axis=1, keepdims=True)))[:, 0]


def _posterior(model, C):
    lw = _weighted_log(model, C)
    top = lw.max(axis=1, keepdims=True)
    top[~np.isfinite(top)] = 0.0
    e = np.exp(lw - top)
    s = e.sum(axis=1, keepdims=True)
    # dividing by the row sum keeps rows at one to round-off, unlike exp(lw - lse)
    return e / s, float((top + np.log(s)).sum())


def e_step(model: MixtureModel, C: np.ndarray) -> np.ndarray:
    """Responsibilities ``gamma[i, k]``, rows summing to one."""
    return _posterior(model, C)[0]


def log_likelihood(model: MixtureModel, C: np.ndarray) -> float:
    return float(_logsumexp_rows(_weighted_log(model, C)).sum())


def m_step(gamma: np.ndarray, C: np.ndarray, floor: float = COV_FLOOR, tied: bool = False) -> MixtureModel:
    """Closed-form maximiser of the expected complete-data log-likelihood.

    Covariance eigenvalues are floored at ``floor``. The floored matrix is the
    exact maximiser over covariances with that eigenvalue bound, so the
    likelihood still never decreases between iterations.

    A component whose total responsibility falls below ``1e-8`` is reseeded at
    the unit with the lowest maximum responsibility, using the global
    covariance; its index is listed in ``model.reseeded``.

    With ``tied=True`` every component keeps the pooled mean and covariance of
    the representation block and only the treatment-given-representation part
    (a weighted least-squares regression) is group specific.
    """
    gamma = np.asarray(gamma, dtype=float)
    C = np.asarray(C, dtype=float)
    n, d = C.shape
    K = gamma.shape[1]
    Nk = gamma.sum(axis=0)
    if tied and d > 1:
        return _tied_m_step(gamma, C, Nk, floor)
    mu = np.empty((K, d))
    sigma = np.empty((K, d, d))
    reseeded = []
    for k in range(K):
        if Nk[k] < EMPTY_MASS:
            reseeded.append(k)
            continue
        mu[k] = gamma[:, k] @ C / Nk[k]
        diff = C - mu[k]
        S = (diff * gamma[:, k, None]).T @ diff / Nk[k]
        sigma[k] = _clip_psd(S, floor)
    pi = Nk / n
    if reseeded:
        weakest = np.argsort(gamma.max(axis=1), kind="stable")
        glob = _clip_psd(np.cov(C, rowvar=False, bias=True).reshape(d, d), floor)
        for j, k in enumerate(reseeded):
            mu[k] = C[weakest[j]]
            sigma[k] = glob
            pi[k] = 1.0 / n
        pi = pi / pi.sum()
    return MixtureModel(pi, mu, sigma, tuple(reseeded))


def _tied_m_step(gamma, C, Nk, floor):
    n, d = C.shape
    K = gamma.shape[1]
    t, R = C[:, 0], C[:, 1:]
    mu_r = R.mean(axis=0)
    S_rr = _clip_psd(np.cov(R, rowvar=False, bias=True).reshape(d - 1, d - 1), floor)
    design = np.column_stack([np.ones(n), R - mu_r])
    reseeded = [k for k in range(K) if Nk[k] < EMPTY_MASS]
    W = gamma.copy()
    W[:, reseeded] = 1.0
    coefs = wls_batch(design, t, W)
    resid = t[:, None] - design @ coefs.T
    s2_all = np.maximum(np.einsum("nk,nk->k", W, resid ** 2) / W.sum(axis=0), floor)
    mu = np.empty((K, d))
    sigma = np.empty((K, d, d))
    for k in range(K):
        s2 = s2_all[k]
        b = coefs[k, 1:]
        mu[k, 0] = coefs[k, 0]
        mu[k, 1:] = mu_r
        sigma[k, 1:, 1:] = S_rr
        sigma[k, 1:, 0] = sigma[k, 0, 1:] = S_rr @ b
        sigma[k, 0, 0] = s2 + b @ S_rr @ b
    pi = Nk / n
    if reseeded:
        pi[reseeded] = 1.0 / n
        pi = pi / pi.sum()
    return MixtureModel(pi, mu, sigma, tuple(reseeded), tied=True)


def wls(A: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted least squares through the (small) weighted normal equations."""
    Aw = A * w[:, None]
    G = A.T @ Aw
    try:
        return cho_solve(cho_factor(G, check_finite=False), Aw.T @ y, check_finite=False)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A * np.sqrt(w)[:, None], y * np.sqrt(w), rcond=None)[0]


def wls_batch(A: np.ndarray, y: np.ndarray, W: np.ndarray) -> np.ndarray:
    """One weighted least-squares fit per column of ``W``; rows of the result
    are the coefficient vectors."""
    AW = A.T[None, :, :] * W.T[:, None, :]       # K x p x n
    G = AW @ A
    h = AW @ y
    try:
        return np.linalg.solve(G, h[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        return np.array([wls(A, y, W[:, k]) for k in range(W.shape[1])])


def fit(C: np.ndarray, K: int, seed: int = 0, tol: float = 1e-6, max_iter: int = 500,
        init: Optional[MixtureModel] = None, n_init: int = 1,
        cross_scale: float = 1.0, tied: bool = False) -> FitResult:
    """Run EM from ``init_constrained`` (or ``init``) until the log-likelihood
    changes by less than ``tol`` or ``max_iter`` iterations have run.

    With ``n_init > 1`` the constrained initialisation is repeated with seeds
    ``seed, seed + 1, ...`` and the run reaching the highest final
    log-likelihood is returned.
    """
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol must be > 0 and max_iter >= 1")
    C = np.asarray(C, dtype=float)
    if init is None and n_init > 1:
        runs = [fit(C, K, seed + r, tol, max_iter, cross_scale=cross_scale, tied=tied)
                for r in range(n_init)]
        return max(runs, key=lambda run: run.trace[-1])
    model = init if init is not None else init_constrained(C, K, seed, cross_scale)
    gamma, ll = _posterior(model, C)
    trace = [ll]
    events = []
    converged = False
    for it in range(max_iter):
        model = m_step(gamma, C, tied=tied)
        if model.reseeded:
            events.append((it, model.reseeded))
        gamma, ll = _posterior(model, C)
        trace.append(ll)
        if abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
    return FitResult(model, trace, converged, events)


def argmax_labels(gamma: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest label
    return np.argmax(gamma, axis=1)


def sample_labels(gamma: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(gamma, axis=1)
    cum /= cum[:, -1:]
    u = rng.random(len(gamma))
    return (cum < u[:, None]).sum(axis=1)


def sample_assignment(model: MixtureModel, C: np.ndarray, seed: int = 0,
                      mode: str = "sampled") -> Assignment:
    gamma = e_step(model, C)
    if mode == "argmax":
        z = argmax_labels(gamma)
    elif mode == "sampled":
        z = sample_labels(gamma, np.random.default_rng(seed))
    else:
        raise ValueError(f"unknown assignment mode {mode!r}")
    return Assignment(gamma, z, mode)


def save_model(model: MixtureModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_json(), fh, indent=2)
        fh.write("\n")
