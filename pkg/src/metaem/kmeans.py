"""Lloyd's K-means with k-means++ seeding."""

import numpy as np


def kmeanspp_centers(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total == 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans(X: np.ndarray, K: int, seed: int = 0, max_iter: int = 300, n_init: int = 4) -> np.ndarray:
    """Hard labels ``0..K-1`` from the lowest-inertia of ``n_init`` runs."""
    X = np.asarray(X, dtype=float)
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(n_init):
        centers = kmeanspp_centers(X, K, rng)
        labels = None
        for _ in range(max_iter):
            d2 = ((X[:, None, :] - centers[None]) ** 2).sum(axis=2)
            new = d2.argmin(axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for k in range(K):
                members = X[labels == k]
                if len(members):
                    centers[k] = members.mean(axis=0)
        inertia = d2[np.arange(len(X)), labels].sum()
        if inertia < best_inertia:
            best, best_inertia = labels, inertia
    return best
