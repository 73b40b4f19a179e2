"""In-batch contrastive distillation between the current model and a frozen teacher."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .exceptions import BatchTooSmall, InvalidConfig, ShapeMismatch

MODES = ("bckd", "sa_only", "ta_only", "mse", "kl")


@dataclass(frozen=True)
class BckdConfig:
    tau_k: float = 0.04
    mode: str = "bckd"

    def __post_init__(self):
        if not self.tau_k > 0:
            raise InvalidConfig(f"tau_k must be > 0, got {self.tau_k}")
        if self.mode not in MODES:
            raise InvalidConfig(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class DistillPair:
    """Student features (trainable) and teacher features (always detached)."""

    student: object
    teacher: object

    def __post_init__(self):
        self.student = dm.as_tensor(self.student)
        self.teacher = dm.stop_gradient(self.teacher)
        if self.student.shape != self.teacher.shape:
            raise ShapeMismatch(f"student {self.student.shape} vs teacher {self.teacher.shape}")


def _anchored(anchor: dm.Tensor, others: dm.Tensor, tau_k: float) -> dm.Tensor:
    # -mean_j log softmax_i(anchor_j . others_i / tau)[j]
    n = anchor.shape[0]
    if n < 2:
        raise BatchTooSmall(f"need at least 2 rows, got {n}")
    log_prob = dm.log_softmax_rows(dm.matmul(anchor, dm.transpose(others)), tau_k)
    return dm.scale(dm.sum_all(dm.mul(log_prob, np.eye(n))), -1.0 / n)


def sa_tensor(pair: DistillPair, cfg: BckdConfig) -> dm.Tensor:
    return _anchored(pair.student, pair.teacher, cfg.tau_k)


def ta_tensor(pair: DistillPair, cfg: BckdConfig) -> dm.Tensor:
    return _anchored(pair.teacher, pair.student, cfg.tau_k)


def bckd_tensor(pair: DistillPair, cfg: BckdConfig) -> dm.Tensor:
    return dm.scale(dm.add(sa_tensor(pair, cfg), ta_tensor(pair, cfg)), 0.5)


def mse_tensor(pair: DistillPair) -> dm.Tensor:
    n = pair.student.shape[0]
    return dm.scale(dm.sum_all(dm.square(dm.sub(pair.student, pair.teacher))), 1.0 / n)


def kl_tensor(pair: DistillPair, cfg: BckdConfig) -> dm.Tensor:
    """Mean KL(teacher-teacher similarity softmax || student-teacher similarity softmax)."""
    n = pair.student.shape[0]
    if n < 2:
        raise BatchTooSmall(f"need at least 2 rows, got {n}")
    t = pair.teacher.value
    target = dm.softmax_rows(t @ t.T, cfg.tau_k).value
    log_target = np.log(np.maximum(target, dm.LOG_CLAMP))
    log_pred = dm.log_softmax_rows(dm.matmul(pair.student, dm.transpose(pair.teacher)), cfg.tau_k)
    entropy_term = float((target * log_target).sum())
    cross = dm.sum_all(dm.mul(log_pred, target))
    return dm.scale(dm.sub(entropy_term, cross), 1.0 / n)


def distill_tensor(pair: DistillPair, cfg: BckdConfig) -> dm.Tensor:
    """Dispatch on ``cfg.mode``."""
    if cfg.mode == "bckd":
        return bckd_tensor(pair, cfg)
    if cfg.mode == "sa_only":
        return sa_tensor(pair, cfg)
    if cfg.mode == "ta_only":
        return ta_tensor(pair, cfg)
    if cfg.mode == "mse":
        return mse_tensor(pair)
    return kl_tensor(pair, cfg)


def sa_loss(pair: DistillPair, cfg: BckdConfig) -> float:
    return sa_tensor(pair, cfg).item()


def ta_loss(pair: DistillPair, cfg: BckdConfig) -> float:
    return ta_tensor(pair, cfg).item()


def bckd_loss(pair: DistillPair, cfg: BckdConfig) -> float:
    return bckd_tensor(pair, cfg).item()


def baseline_distill_loss(pair: DistillPair, cfg: BckdConfig) -> float:
    """MSE or KL baseline; ``cfg.mode`` selects which (defaults to MSE for other modes)."""
    if cfg.mode == "kl":
        return kl_tensor(pair, cfg).item()
    return mse_tensor(pair).item()
