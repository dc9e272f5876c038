"""Synthetic multi-source datasets and delimited-file ingestion.

Labels are stored 0-based in memory (``0..K-1``) and written 1-based to disk.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for invalid scenario specs or malformed input files."""


SCENARIOS = ("linear", "poly", "sin", "sigmoid", "abs")


def scenario_fx(kind: str, x: np.ndarray) -> np.ndarray:
    """Per-covariate treatment nonlinearity of a scenario."""
    if kind == "linear":
        return x
    if kind == "poly":
        return x ** 2
    if kind == "sin":
        return np.sin(x)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if kind == "abs":
        return np.abs(x)
    raise DataError(f"unknown scenario kind {kind!r}; expected one of {SCENARIOS}")


def true_ite(t):
    """Ground-truth individual treatment effect g(t, x) - g(0, x)."""
    t = np.asarray(t, dtype=float)
    return -1.5 * t + 0.9 * t ** 2


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "linear"
    k_true: int = 3
    m_x: int = 3
    n: int = 3000
    sigma_xe: float = 0.1
    seed: int = 0
    # standard deviations of the additive treatment/outcome noise
    noise_t: float = 0.1
    noise_y: float = 0.1
    confounder: bool = True

    def validate(self) -> None:
        if self.kind not in SCENARIOS:
            raise DataError(f"unknown scenario kind {self.kind!r}")
        if self.k_true < 2:
            raise DataError(f"k_true must be >= 2, got {self.k_true}")
        if self.m_x < 1:
            raise DataError(f"m_x must be >= 1, got {self.m_x}")
        if self.n < 1:
            raise DataError(f"n must be >= 1, got {self.n}")
        if self.noise_t < 0 or self.noise_y < 0:
            raise DataError("noise standard deviations must be non-negative")
        if not self.seed >= 0:
            raise DataError("seed must be a non-negative integer")
        try:
            np.linalg.cholesky(self.joint_covariance())
        except np.linalg.LinAlgError:
            raise DataError(
                f"covariance of (X, eps) is not positive definite for "
                f"sigma_xe={self.sigma_xe}, m_x={self.m_x} (need m_x * sigma_xe**2 < 1)"
            ) from None

    def joint_covariance(self) -> np.ndarray:
        cov = np.eye(self.m_x + 1)
        cov[:-1, -1] = self.sigma_xe
        cov[-1, :-1] = self.sigma_xe
        return cov

    @property
    def name(self) -> str:
        return f"{self.kind.capitalize()}-{self.k_true}-{self.m_x}"


@dataclass
class Dataset:
    X: np.ndarray
    T: np.ndarray
    Y: np.ndarray
    z_true: Optional[np.ndarray] = None
    eps: Optional[np.ndarray] = None
    # per-unit ground-truth ITE at the unit's own treatment, when known
    ite: Optional[np.ndarray] = None
    columns: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X.reshape(-1, 1)
        self.T = np.asarray(self.T, dtype=float).ravel()
        self.Y = np.asarray(self.Y, dtype=float).ravel()
        n = self.X.shape[0]
        if n < 1:
            raise DataError("dataset must contain at least one row")
        if len(self.T) != n or len(self.Y) != n:
            raise DataError(f"row counts disagree: X={n}, T={len(self.T)}, Y={len(self.Y)}")
        for name in ("X", "T", "Y"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"{name} contains non-finite values")
        if self.z_true is not None:
            self.z_true = np.asarray(self.z_true, dtype=int).ravel()
            if len(self.z_true) != n:
                raise DataError("z_true length does not match X")
            if self.z_true.min() < 0:
                raise DataError("labels must be non-negative (0-based)")
        if not self.columns:
            self.columns = tuple(f"X{j + 1}" for j in range(self.m_x))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m_x(self) -> int:
        return self.X.shape[1]

    @property
    def k_true(self) -> Optional[int]:
        if self.z_true is None:
            return None
        return int(self.z_true.max()) + 1

    @property
    def synthetic(self) -> bool:
        return "spec" in self.meta

    def subset(self, idx) -> "Dataset":
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.X[idx], self.T[idx], self.Y[idx], pick(self.z_true),
                       pick(self.eps), pick(self.ite), self.columns, dict(self.meta))


def _streams(seed: int, sample_seed: Optional[int]):
    # mechanism weights and unit samples come from separate streams so a test
    # set can share the training mechanism while drawing fresh units
    w_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    s = seed if sample_seed is None else sample_seed
    s_rng = np.random.default_rng(np.random.SeedSequence([s, 1]))
    return w_rng, s_rng


def generate(spec: ScenarioSpec, sample_seed: Optional[int] = None, n: Optional[int] = None) -> Dataset:
    """Draw a mixed multi-source dataset.

    Args:
        spec: scenario definition, including the seed that fixes the per-group
            treatment weights.
        sample_seed: seed for the unit draws; defaults to ``spec.seed``. Passing a
            different value gives a fresh sample from the same mechanism.
        n: override the number of units.

    Returns:
        A ``Dataset`` with ``z_true``, ``eps`` and ``ite`` populated and the
        weight matrix stored in ``meta["w"]``.
    """
    spec.validate()
    n = spec.n if n is None else n
    if n < 1:
        raise DataError("n must be >= 1")
    m, K = spec.m_x, spec.k_true
    w_rng, rng = _streams(spec.seed, sample_seed)
    w = w_rng.uniform(-1.0, 1.0, size=(K, m))

    xe = rng.multivariate_normal(np.zeros(m + 1), spec.joint_covariance(), size=n, method="cholesky")
    X, eps = xe[:, :m], xe[:, m]
    z = rng.integers(0, K, size=n)
    delta_t = rng.standard_normal(n) * spec.noise_t
    delta_y = rng.standard_normal(n) * spec.noise_y
    if not spec.confounder:
        eps = np.zeros(n)

    basis = X + scenario_fx(spec.kind, X)
    T = np.einsum("ij,ij->i", basis, w[z]) + 0.2 * eps + delta_t

    # missing covariates for the interaction terms are clamped to the last column
    c = lambda j: X[:, min(j, m - 1)]
    Y = (-1.5 * T + 0.9 * T ** 2 + X.mean(axis=1) + np.abs(c(0) * c(1))
         - np.sin(10.0 + c(1) * c(2)) + 2.0 * eps + delta_y)

    meta = {"spec": asdict(spec), "w": w.tolist(),
            "sample_seed": spec.seed if sample_seed is None else sample_seed}
    return Dataset(X, T, Y, z_true=z, eps=eps, ite=true_ite(T), meta=meta)


def heldout_seed(seed: int) -> int:
    """Sample seed for the held-out interventional test set of a replication."""
    return int(np.random.SeedSequence([seed, 7919]).generate_state(1)[0])


def generate_test(spec: ScenarioSpec, n: Optional[int] = None) -> Dataset:
    """Fresh units from the same mechanism as ``generate(spec)``."""
    return generate(spec, sample_seed=heldout_seed(spec.seed), n=n)


# -- delimited files ---------------------------------------------------------

@dataclass(frozen=True)
class Schema:
    """Column roles for ``load_csv``."""
    x: Sequence[str]
    t: str = "T"
    y: str = "Y"
    z: Optional[str] = None
    ite: Optional[str] = None


def load_csv(path, schema: Schema) -> Dataset:
    """Read a comma-delimited file with a header row into a ``Dataset``.

    Label values of the ``z`` column may be any strings; they are mapped to
    ``0..K-1`` in sorted order of distinct values (numeric order when all
    labels parse as numbers).
    """
    if not os.path.exists(path):
        raise DataError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        rows = list(reader)
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path}: no data rows")

    wanted = list(schema.x) + [schema.t, schema.y]
    for opt in (schema.z, schema.ite):
        if opt is not None:
            wanted.append(opt)
    missing = [c for c in wanted if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    index = {name: header.index(name) for name in wanted}

    def numeric(col):
        j = index[col]
        out = np.empty(len(rows))
        for i, row in enumerate(rows):
            # row numbers are 1-based file lines, header is line 1
            cell = row[j].strip() if j < len(row) else ""
            if cell == "":
                raise DataError(f"{path}: row {i + 2}, column {col!r}: empty cell")
            try:
                out[i] = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {i + 2}, column {col!r}: non-numeric value {cell!r}") from None
            if not np.isfinite(out[i]):
                raise DataError(f"{path}: row {i + 2}, column {col!r}: non-finite value {cell!r}")
        return out

    X = np.column_stack([numeric(c) for c in schema.x]) if schema.x else np.empty((len(rows), 0))
    T, Y = numeric(schema.t), numeric(schema.y)
    z = None
    if schema.z is not None:
        j = index[schema.z]
        raw = []
        for i, row in enumerate(rows):
            cell = row[j].strip() if j < len(row) else ""
            if cell == "":
                raise DataError(f"{path}: row {i + 2}, column {schema.z!r}: empty cell")
            raw.append(cell)
        z = encode_labels(raw)
    ite = numeric(schema.ite) if schema.ite is not None else None
    return Dataset(X, T, Y, z_true=z, ite=ite, columns=tuple(schema.x),
                   meta={"source": os.path.abspath(path)})


def encode_labels(raw) -> np.ndarray:
    """Map arbitrary label values to 0..K-1."""
    levels = sorted(set(raw))
    try:
        levels = sorted(levels, key=float)
    except ValueError:
        pass
    lookup = {v: k for k, v in enumerate(levels)}
    return np.array([lookup[v] for v in raw], dtype=int)


def _fmt(v: float) -> str:
    return repr(float(v))


def save(dataset: Dataset, directory) -> None:
    """Write ``data.csv`` and ``meta.json`` into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    header = list(dataset.columns) + ["T", "Y"]
    extras = []
    if dataset.z_true is not None:
        header.append("z")
        extras.append(("z", dataset.z_true + 1))
    if dataset.eps is not None:
        header.append("eps")
        extras.append(("eps", dataset.eps))
    if dataset.ite is not None:
        header.append("ite")
        extras.append(("ite", dataset.ite))
    with open(os.path.join(directory, "data.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n):
            row = [_fmt(v) for v in dataset.X[i]] + [_fmt(dataset.T[i]), _fmt(dataset.Y[i])]
            for name, col in extras:
                row.append(str(int(col[i])) if name == "z" else _fmt(col[i]))
            writer.writerow(row)
    meta = dict(dataset.meta)
    meta["columns"] = list(dataset.columns)
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load(directory) -> Dataset:
    """Inverse of ``save``."""
    data_path = os.path.join(directory, "data.csv")
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.isdir(directory) or not os.path.exists(data_path):
        raise DataError(f"{directory}: not a dataset directory (data.csv missing)")
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    with open(data_path, encoding="utf-8") as fh:
        header = next(csv.reader(fh))
    columns = meta.get("columns") or [h for h in header if h not in ("T", "Y", "z", "eps", "ite")]
    schema = Schema(x=columns, z="z" if "z" in header else None,
                    ite="ite" if "ite" in header else None)
    ds = load_csv(data_path, schema)
    if "eps" in header:
        ds.eps = load_csv(data_path, Schema(x=["eps"])).X[:, 0]
    if ds.z_true is not None:
        # on-disk labels are 1-based; keep the numeric coding rather than re-encoding gaps
        ds.z_true = load_csv(data_path, Schema(x=["z"])).X[:, 0].astype(int) - 1
    meta.pop("columns", None)
    ds.meta = meta
    return ds


def spec_from_meta(meta: dict) -> Optional[ScenarioSpec]:
    if "spec" not in meta:
        return None
    return ScenarioSpec(**meta["spec"])
