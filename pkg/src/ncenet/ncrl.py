"""Neighborhood-commonality self-distillation.

For each row the k most similar other rows of the batch are averaged into a
local commonality. A sharpened distribution of view 1 over all commonalities
is the target; the temperature-1 distribution of view 2 is trained toward it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import diffmath as dm
from .exceptions import EmptyNeighborList, InvalidConfig, KTooLarge, ShapeMismatch

SELECTIONS = ("fixed_k", "threshold")
PREDICTION_SOURCES = ("commonality", "random_prototypes", "kmeans_centroids")


@dataclass(frozen=True)
class NcrlConfig:
    k: int = 5
    selection: str = "fixed_k"
    alpha: float = 0.9
    tau: float = 0.07
    prediction_source: str = "commonality"
    include_self: bool = False
    block_target_gradients: bool = True
    n_prototypes: int = 10
    kmeans_iters: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise InvalidConfig(f"k must be >= 1, got {self.k}")
        if self.selection not in SELECTIONS:
            raise InvalidConfig(f"selection must be one of {SELECTIONS}, got {self.selection!r}")
        if not -1.0 < self.alpha <= 1.0:
            raise InvalidConfig(f"alpha must lie in (-1, 1], got {self.alpha}")
        if not self.tau > 0:
            raise InvalidConfig(f"tau must be > 0, got {self.tau}")
        if self.prediction_source not in PREDICTION_SOURCES:
            raise InvalidConfig(
                f"prediction_source must be one of {PREDICTION_SOURCES}, got {self.prediction_source!r}"
            )
        if self.n_prototypes < 1:
            raise InvalidConfig(f"n_prototypes must be >= 1, got {self.n_prototypes}")


@dataclass
class CommonalitySet:
    omega: np.ndarray
    neighbor_indices: list[np.ndarray]
    mu: np.ndarray


@dataclass
class PredictionPair:
    p: dm.Tensor
    p_hat: dm.Tensor


def select_neighbors(omega, cfg: NcrlConfig) -> list[np.ndarray]:
    """Neighbor indices per row of a similarity matrix.

    ``fixed_k`` keeps the k most similar rows (ties to the lower index);
    ``threshold`` keeps every row with similarity >= alpha and falls back to
    the single nearest row when nothing qualifies.
    """
    omega = np.asarray(omega, dtype=np.float64)
    n = omega.shape[0]
    if omega.ndim != 2 or omega.shape[1] != n:
        raise ShapeMismatch(f"omega must be square, got {omega.shape}")
    if cfg.selection == "fixed_k" and cfg.k >= n:
        raise KTooLarge(f"k={cfg.k} must be < batch size {n}")
    out = []
    for i in range(n):
        row = omega[i]
        cand = np.arange(n) if cfg.include_self else np.delete(np.arange(n), i)
        # stable sort on -similarity keeps the lowest index first among ties
        order = cand[np.argsort(-row[cand], kind="stable")]
        if cfg.selection == "fixed_k":
            out.append(np.sort(order[: cfg.k]))
        else:
            chosen = cand[row[cand] >= cfg.alpha]
            out.append(chosen if chosen.size else order[:1])
    return out


def compute_commonalities(z, indices: Sequence[np.ndarray]) -> np.ndarray:
    """mu_i = plain mean of the neighbor rows of i (no re-normalization)."""
    z = np.asarray(dm.as_tensor(z).value)
    mu = np.empty((len(indices), z.shape[1]))
    for i, idx in enumerate(indices):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            raise EmptyNeighborList(f"row {i} has no neighbors")
        mu[i] = z[idx].mean(axis=0)
    return mu


def commonality_set(z, cfg: NcrlConfig) -> CommonalitySet:
    zv = dm.as_tensor(z).value
    omega = dm.cosine_similarity_matrix(zv).value
    indices = select_neighbors(omega, cfg)
    return CommonalitySet(omega, indices, compute_commonalities(zv, indices))


def random_prototypes(n: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A07]))
    protos = rng.normal(size=(n, dim))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def kmeans_prototypes(z, n: int, iters: int, seed: int) -> np.ndarray:
    from .evaluation import KmeansConfig, kmeans_cluster

    zv = dm.as_tensor(z).value
    n = min(n, zv.shape[0])
    result = kmeans_cluster(zv, KmeansConfig(K=n, max_iters=iters, restarts=1, seed=seed))
    return result.centroids


def prediction_distribution(z, z_hat, mu, cfg: NcrlConfig) -> PredictionPair:
    """Sharpened target ``p`` from view 1 and temperature-1 prediction ``p_hat`` from view 2."""
    z, z_hat = dm.as_tensor(z), dm.as_tensor(z_hat)
    mu = dm.stop_gradient(mu)
    if z.shape != z_hat.shape or mu.shape[1] != z.shape[1]:
        raise ShapeMismatch(f"z {z.shape}, z_hat {z_hat.shape}, mu {mu.shape} do not conform")
    target_in = dm.stop_gradient(z) if cfg.block_target_gradients else z
    mu_t = dm.transpose(mu)
    p = dm.softmax_rows(dm.matmul(target_in, mu_t), cfg.tau)
    p_hat = dm.softmax_rows(dm.matmul(z_hat, mu_t), 1.0)
    return PredictionPair(p, p_hat)


def ncrl_loss_tensor(pair: PredictionPair) -> dm.Tensor:
    n = pair.p.shape[0]
    return dm.scale(dm.sum_all(dm.mul(pair.p, dm.log(pair.p_hat))), -1.0 / n)


def ncrl_loss(pair: PredictionPair) -> float:
    return ncrl_loss_tensor(pair).item()


def ncrl_objective(z, z_hat, cfg: NcrlConfig, prototypes: Optional[np.ndarray] = None, seed: int = 0) -> dm.Tensor:
    """Full NCRL loss for one batch of projected views.

    ``prototypes`` replaces the commonalities when the prediction source is
    ``random_prototypes``; ``kmeans_centroids`` clusters view 1 on the fly.
    """
    z = dm.as_tensor(z)
    if cfg.prediction_source == "commonality":
        mu = commonality_set(z, cfg).mu
    elif cfg.prediction_source == "random_prototypes":
        if prototypes is None:
            prototypes = random_prototypes(cfg.n_prototypes, z.shape[1], seed)
        mu = prototypes
    else:
        mu = kmeans_prototypes(z, cfg.n_prototypes, cfg.kmeans_iters, seed)
    return ncrl_loss_tensor(prediction_distribution(z, z_hat, mu, cfg))


def row_entropy(p) -> float:
    """Mean row entropy of a row-stochastic matrix."""
    p = np.asarray(dm.as_tensor(p).value)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return float(-terms.sum(axis=1).mean())
