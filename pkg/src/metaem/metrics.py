"""Label-matching and group-balance metrics."""

from __future__ import annotations

import itertools

import numpy as np

MAX_PERMUTATION_K = 8


def confusion(z_hat, z_true, K: int) -> np.ndarray:
    z_hat = np.asarray(z_hat, dtype=int)
    z_true = np.asarray(z_true, dtype=int)
    if z_hat.shape != z_true.shape:
        raise ValueError("label vectors must have equal length")
    if len(z_hat) and (z_hat.min() < 0 or z_hat.max() >= K or z_true.min() < 0 or z_true.max() >= K):
        raise ValueError(f"labels must lie in 0..{K - 1}")
    M = np.zeros((K, K), dtype=np.int64)
    np.add.at(M, (z_hat, z_true), 1)
    return M


def best_permutation(z_hat, z_true, K: int) -> tuple:
    """Exhaustive search for the relabeling of ``z_hat`` that agrees most with
    ``z_true``. Returns ``(perm, matches)`` with ``perm[a]`` the true label
    assigned to estimated label ``a``."""
    if K > MAX_PERMUTATION_K:
        raise ValueError(f"K={K} exceeds {MAX_PERMUTATION_K}; exhaustive matching is limited "
                         "to small K (use an assignment-based matcher instead)")
    M = confusion(z_hat, z_true, K)
    rows = np.arange(K)
    best, best_perm = -1, None
    for perm in itertools.permutations(range(K)):
        hits = int(M[rows, perm].sum())
        if hits > best:
            best, best_perm = hits, perm
    return np.array(best_perm), best


def reconstruction_accuracy(z_hat, z_true, K: int) -> float:
    """Fraction of units whose estimated group matches the true one under the
    best relabeling of the estimate."""
    n = len(z_true)
    if n == 0:
        raise ValueError("empty label vectors")
    _, hits = best_permutation(z_hat, z_true, K)
    return hits / n


def group_means(X, z, K: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    z = np.asarray(z, dtype=int)
    counts = np.bincount(z, minlength=K)
    empty = np.flatnonzero(counts[:K] == 0)
    if len(empty):
        raise ValueError(f"group {int(empty[0]) + 1} is empty")
    sums = np.zeros((K, X.shape[1]))
    np.add.at(sums, z, X)
    return sums / counts[:K, None]


def mmd(X, z, K: int, normalization: str = "pairs") -> float:
    """Spread of the per-group covariate means.

    With ``normalization="pairs"`` this is the average of ``||xbar_i - xbar_j||^2``
    over the ``K(K-1)/2`` group pairs. ``"units"`` scales the same sum by
    ``2 / (n (n - 1))`` instead.
    """
    if K < 2:
        return 0.0
    means = group_means(X, z, K)
    total = 0.0
    for i in range(K):
        for j in range(i + 1, K):
            diff = means[i] - means[j]
            total += float(diff @ diff)
    if normalization == "pairs":
        return 2.0 * total / (K * (K - 1))
    if normalization == "units":
        n = len(z)
        return 2.0 * total / (n * (n - 1))
    raise ValueError(f"unknown normalization {normalization!r}")
