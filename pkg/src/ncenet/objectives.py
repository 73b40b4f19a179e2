"""Base-session contrastive losses and the incremental-session blend."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffmath as dm
from .exceptions import BatchTooSmall, InvalidConfig, NoLabelledInstances, ShapeMismatch


@dataclass(frozen=True)
class BaseLossConfig:
    tau_r: float = 0.1
    beta: float = 0.35

    def __post_init__(self):
        if not self.tau_r > 0:
            raise InvalidConfig(f"tau_r must be > 0, got {self.tau_r}")
        if not 0.0 <= self.beta <= 1.0:
            raise InvalidConfig(f"beta must lie in [0, 1], got {self.beta}")


@dataclass(frozen=True)
class BlendConfig:
    lambda_b: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.lambda_b <= 1.0:
            raise InvalidConfig(f"lambda_b must lie in [0, 1], got {self.lambda_b}")


@dataclass
class EmbeddingBatch:
    """Two views of a mini-batch of projected features; label -1 marks unlabelled rows."""

    z: object
    z_hat: object
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.z = dm.as_tensor(self.z)
        self.z_hat = dm.as_tensor(self.z_hat)
        if self.z.shape != self.z_hat.shape:
            raise ShapeMismatch(f"views differ in shape: {self.z.shape} vs {self.z_hat.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
            if self.labels.shape[0] != self.z.shape[0]:
                raise ShapeMismatch(f"{self.labels.shape[0]} labels for {self.z.shape[0]} rows")

    def __len__(self):
        return self.z.shape[0]


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    sup: Optional[float] = None
    unsup: Optional[float] = None
    ncrl: Optional[float] = None
    sa: Optional[float] = None
    ta: Optional[float] = None
    bckd: Optional[float] = None

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("sup", "unsup", "ncrl", "sa", "ta", "bckd", "total")}


def sup_contrastive_tensor(z, labels, tau_r: float) -> dm.Tensor:
    """Supervised contrastive loss over labelled anchors.

    Positives are other rows with the same label; the normalizer runs over
    every other row of the batch. Anchors without positives are dropped.
    """
    z = dm.as_tensor(z)
    labels = np.asarray(labels).ravel()
    n = z.shape[0]
    labelled = labels >= 0
    if not labelled.any():
        raise NoLabelledInstances("batch has no labelled rows")
    off_diag = ~np.eye(n, dtype=bool)
    positives = (labels[:, None] == labels[None, :]) & labelled[:, None] & labelled[None, :] & off_diag
    counts = positives.sum(axis=1)
    anchors = counts > 0
    if not anchors.any():
        return dm.scale(dm.sum_all(dm.mul(z, 0.0)), 0.0)
    weights = np.where(positives, 1.0 / np.maximum(counts, 1)[:, None], 0.0)
    log_prob = dm.log_softmax_rows(dm.matmul(z, dm.transpose(z)), tau_r, mask=off_diag)
    return dm.scale(dm.sum_all(dm.mul(log_prob, weights)), -1.0 / anchors.sum())


def unsup_contrastive_tensor(z, z_hat, tau_r: float) -> dm.Tensor:
    """Instance contrast: positive is the other view, negatives are same-view rows."""
    z, z_hat = dm.as_tensor(z), dm.as_tensor(z_hat)
    n = z.shape[0]
    if n < 2:
        raise BatchTooSmall(f"need at least 2 rows, got {n}")
    eye = np.eye(n)
    positive = dm.sum_rows(dm.mul(z, z_hat))
    logits = dm.add(dm.mul(dm.matmul(z, dm.transpose(z)), 1.0 - eye), dm.mul(positive, eye))
    log_prob = dm.log_softmax_rows(logits, tau_r)
    return dm.scale(dm.sum_all(dm.mul(log_prob, eye)), -1.0 / n)


def sup_contrastive_loss(batch: EmbeddingBatch, cfg: BaseLossConfig) -> float:
    if batch.labels is None:
        raise NoLabelledInstances("batch carries no labels")
    return sup_contrastive_tensor(batch.z, batch.labels, cfg.tau_r).item()


def unsup_contrastive_loss(batch: EmbeddingBatch, cfg: BaseLossConfig) -> float:
    return unsup_contrastive_tensor(batch.z, batch.z_hat, cfg.tau_r).item()


def base_objective_tensor(z, z_hat, labels, cfg: BaseLossConfig):
    """Returns (total tensor, sup tensor or None, unsup tensor)."""
    unsup = unsup_contrastive_tensor(z, z_hat, cfg.tau_r)
    has_labels = labels is not None and (np.asarray(labels) >= 0).any()
    if not has_labels:
        return unsup, None, unsup
    sup = sup_contrastive_tensor(z, labels, cfg.tau_r)
    total = dm.add(dm.scale(sup, cfg.beta), dm.scale(unsup, 1.0 - cfg.beta))
    return total, sup, unsup


def base_objective(batch: EmbeddingBatch, cfg: BaseLossConfig) -> LossBreakdown:
    total, sup, unsup = base_objective_tensor(batch.z, batch.z_hat, batch.labels, cfg)
    return LossBreakdown(total=total.item(), sup=None if sup is None else sup.item(), unsup=unsup.item())


def blend(ncrl, bckd, lambda_b: float):
    """lambda_b * ncrl + (1 - lambda_b) * bckd, for floats or tensors."""
    if isinstance(ncrl, dm.Tensor) or isinstance(bckd, dm.Tensor):
        return dm.add(dm.scale(ncrl, lambda_b), dm.scale(bckd, 1.0 - lambda_b))
    return lambda_b * ncrl + (1.0 - lambda_b) * bckd


def total_objective(ncrl_loss: float, bckd_loss: float, cfg: BlendConfig) -> float:
    return blend(float(ncrl_loss), float(bckd_loss), cfg.lambda_b)
