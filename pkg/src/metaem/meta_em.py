"""Alternating reconstruction of the latent group instrument.

Each round trains the shared representation with the current group labels
held fixed, then refits the Gaussian mixture on ``(T, R)`` and redraws the
labels from the responsibilities. ``variant="meta-km"`` swaps the mixture for
K-means and ``variant="em"`` stops after the initial mixture fit on ``(T, X)``.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field, asdict, replace
from typing import Optional, Union

import numpy as np

from . import mixture
from .dataset import Dataset
from .kmeans import kmeans
from .metrics import best_permutation, mmd, reconstruction_accuracy
from .representation import RepresentationModel, TrainConfig, train

log = logging.getLogger(__name__)

VARIANTS = ("meta-em", "meta-km", "em")


@dataclass(frozen=True)
class MetaConfig:
    K: Union[int, str] = "auto"
    outer_rounds: int = 10
    rep: TrainConfig = TrainConfig()
    map_kind: str = "mlp"
    degree: int = 2
    hidden: Optional[int] = None
    m_r: Optional[int] = None
    em_tol: float = 1e-6
    em_max_iter: int = 500
    em_restarts: int = 4
    cross_scale: float = 1.0
    tied: bool = True
    warm_start: bool = False
    variant: str = "meta-em"
    k_search: tuple = (2, 3, 4, 5, 6)
    stop_change: float = 0.01
    mmd_normalization: str = "pairs"
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.outer_rounds < 1:
            raise ValueError("outer_rounds must be >= 1")
        if self.K == "auto":
            if not self.k_search:
                raise ValueError("k_search must be non-empty when K is 'auto'")
            if min(self.k_search) < 1:
                raise ValueError("k_search values must be >= 1")
        elif not isinstance(self.K, (int, np.integer)) or self.K < 1:
            raise ValueError(f"K must be a positive integer or 'auto', got {self.K!r}")
        self.rep.validate()

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["k_search"] = list(self.k_search)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "MetaConfig":
        doc = dict(doc)
        doc["rep"] = TrainConfig(**doc.get("rep", {}))
        if "k_search" in doc:
            doc["k_search"] = tuple(doc["k_search"])
        return cls(**doc)


@dataclass
class GivResult:
    gamma: np.ndarray
    z: np.ndarray            # sampled labels, used as the instrument
    z_argmax: np.ndarray
    K: int
    representation: Optional[RepresentationModel]
    mixture: Optional[mixture.MixtureModel]
    trace: list = field(default_factory=list)
    mmd_curve: dict = field(default_factory=dict)
    selected_K: Optional[int] = None
    variant: str = "meta-em"

    def labels(self, mode: str = "sampled") -> np.ndarray:
        if mode == "sampled":
            return self.z
        if mode == "argmax":
            return self.z_argmax
        raise ValueError(f"unknown label mode {mode!r}")


def _joint(T, R):
    return np.column_stack([np.asarray(T, dtype=float), R])


def _distribution_step(C, K, cfg: MetaConfig, seed: int, prev: Optional[mixture.MixtureModel]):
    if cfg.variant == "meta-km":
        z = kmeans(_standardize(C), K, seed=seed)
        return np.eye(K)[z], z, z, None, {}
    init = prev if (cfg.warm_start and prev is not None) else None
    try:
        res = mixture.fit(C, K, seed=seed, tol=cfg.em_tol, max_iter=cfg.em_max_iter,
                          init=init, n_init=cfg.em_restarts, cross_scale=cfg.cross_scale, tied=cfg.tied)
    except np.linalg.LinAlgError as exc:
        log.warning("EM failed (%s); retrying with a fresh initialisation", exc)
        res = mixture.fit(C, K, seed=seed + 10007, tol=cfg.em_tol, max_iter=cfg.em_max_iter,
                          n_init=cfg.em_restarts, cross_scale=cfg.cross_scale, tied=cfg.tied)
    gamma = mixture.e_step(res.model, C)
    z_arg = mixture.argmax_labels(gamma)
    z = mixture.sample_labels(gamma, np.random.default_rng(seed))
    info = {"em_loglik": res.trace[-1], "em_iterations": res.iterations,
            "em_converged": res.converged, "em_reseeds": len(res.reseed_events)}
    return gamma, z, z_arg, res.model, info


def _standardize(C):
    sd = C.std(axis=0)
    sd[sd == 0] = 1.0
    return (C - C.mean(axis=0)) / sd


def _align(gamma, z, z_arg, model, reference, K):
    """Relabel components to agree with the previous round's argmax labels."""
    perm, _ = best_permutation(z_arg, reference, K)
    inv = np.argsort(perm)  # inv[new label] = old component index
    gamma = gamma[:, inv]
    if model is not None:
        model = model.permute(inv)
    return gamma, perm[z], perm[z_arg], model


def run(dataset: Dataset, cfg: MetaConfig = MetaConfig()) -> GivResult:
    """Reconstruct the group instrument; ``K="auto"`` selects K by ``select_k``."""
    cfg.validate()
    if cfg.K == "auto":
        K, curve, results = select_k(dataset, cfg)
        best = results[K]
        best.mmd_curve = curve
        best.selected_K = K
        return best
    K = int(cfg.K)
    X, T = dataset.X, dataset.T
    if dataset.n <= dataset.m_x + 1:
        raise ValueError(f"need n > m_x + 1 (n={dataset.n}, m_x={dataset.m_x})")

    C = _joint(T, X)
    gamma, z, z_arg, model, info = _distribution_step(C, K, cfg, cfg.seed, None)
    trace = [dict(round=0, rep_loss=float("nan"), label_change=float("nan"), **info)]
    rep = None
    if cfg.variant != "em":
        rep = RepresentationModel.create(cfg.map_kind, dataset.m_x, K, m_r=cfg.m_r, degree=cfg.degree,
                                         hidden=cfg.hidden, seed=cfg.seed)
        for s in range(1, cfg.outer_rounds + 1):
            rep_cfg = replace(cfg.rep, seed=cfg.rep.seed + 1000 * s + cfg.seed)
            rep, rep_trace = train(rep, X, T, z, rep_cfg)
            C = _joint(T, rep.forward(X))
            round_seed = cfg.seed + 7 * s
            prev_arg = z_arg
            gamma, z, z_arg, model, info = _distribution_step(C, K, cfg, round_seed, model)
            gamma, z, z_arg, model = _align(gamma, z, z_arg, model, prev_arg, K)
            change = 1.0 - reconstruction_accuracy(z_arg, prev_arg, K) if K > 1 else 0.0
            trace.append(dict(round=s, rep_loss=rep_trace[-1], label_change=change, **info))
            log.debug("round %d: rep loss %.4g, label change %.4f", s, rep_trace[-1], change)
            if change < cfg.stop_change:
                break
    return GivResult(gamma, z, z_arg, K, rep, model, trace, variant=cfg.variant)


def run_kmeans_variant(dataset: Dataset, cfg: MetaConfig = MetaConfig()) -> GivResult:
    return run(dataset, replace(cfg, variant="meta-km"))


def select_k(dataset: Dataset, cfg: MetaConfig) -> tuple:
    """Fit every K in ``cfg.k_search`` and keep the one whose argmax groups
    have the most similar covariate means.

    Returns ``(selected_K, curve, results)`` where ``curve`` maps K to the MMD
    value and ``results`` maps K to its ``GivResult``. Ties go to the smallest K.
    """
    if not cfg.k_search:
        raise ValueError("k_search must be non-empty")
    curve, results = {}, {}
    for K in sorted(cfg.k_search):
        res = run(dataset, replace(cfg, K=int(K)))
        results[K] = res
        try:
            curve[K] = mmd(dataset.X, res.z_argmax, K, cfg.mmd_normalization)
        except ValueError:
            # an empty argmax group means the mixture collapsed below K components
            curve[K] = float("inf")
    return argmin_k(curve), curve, results


def argmin_k(curve: dict) -> int:
    best = min(curve.values())
    return min(k for k, v in curve.items() if v == best)


def save_result(result: GivResult, directory) -> None:
    """Write labels, responsibilities, models, MMD curve and trace."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["z_sampled", "z_argmax"])
        for a, b in zip(result.z, result.z_argmax):
            w.writerow([int(a) + 1, int(b) + 1])
    with open(os.path.join(directory, "gamma.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"gamma{k + 1}" for k in range(result.K)])
        for row in result.gamma:
            w.writerow([repr(float(v)) for v in row])
    if result.mixture is not None:
        mixture.save_model(result.mixture, os.path.join(directory, "mixture.json"))
    if result.representation is not None:
        result.representation.save(os.path.join(directory, "representation.json"))
    with open(os.path.join(directory, "mmd_curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "mmd", "selected"])
        for K, v in sorted(result.mmd_curve.items()):
            w.writerow([K, repr(float(v)), int(K == result.selected_K)])
    keys = ["round", "rep_loss", "em_loglik", "em_iterations", "em_converged", "em_reseeds", "label_change"]
    with open(os.path.join(directory, "trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in result.trace:
            w.writerow([row.get(k, "") for k in keys])


def load_labels(directory, mode: str = "sampled") -> np.ndarray:
    col = {"sampled": "z_sampled", "argmax": "z_argmax"}[mode]
    with open(os.path.join(directory, "labels.csv"), newline="") as fh:
        reader = csv.DictReader(fh)
        return np.array([int(r[col]) - 1 for r in reader], dtype=int)
