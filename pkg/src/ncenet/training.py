"""Base-session and incremental-session training loops (plain SGD, per-epoch cosine schedule)."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import diffmath as dm
from .bckd import BckdConfig, DistillPair, distill_tensor, sa_tensor, ta_tensor
from .data import SessionStream, augment_views
from .exceptions import EmptyStream, InvalidConfig, StepOutOfRange, TeacherShapeMismatch
from .model import ModelConfig, ModelState, TeacherSnapshot, forward_tensors, init_model, save_checkpoint
from .ncrl import NcrlConfig, ncrl_objective, random_prototypes
from .objectives import BaseLossConfig, BlendConfig, LossBreakdown, base_objective_tensor, blend

log = logging.getLogger(__name__)

SCHEDULES = ("cosine", "constant")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 30
    lr_init: float = 0.1
    lr_min: float = 0.0
    schedule: str = "cosine"
    augment_sigma: float = 0.3
    seed: int = 0
    base_loss: BaseLossConfig = field(default_factory=BaseLossConfig)
    blend: BlendConfig = field(default_factory=BlendConfig)
    ncrl: NcrlConfig = field(default_factory=NcrlConfig)
    bckd: BckdConfig = field(default_factory=BckdConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise InvalidConfig(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr_init > 0 or self.lr_min < 0:
            raise InvalidConfig(f"need lr_init > 0 and lr_min >= 0, got {self.lr_init}, {self.lr_min}")
        if self.schedule not in SCHEDULES:
            raise InvalidConfig(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not self.augment_sigma > 0:
            raise InvalidConfig(f"augment_sigma must be > 0, got {self.augment_sigma}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"base_loss": BaseLossConfig, "blend": BlendConfig, "ncrl": NcrlConfig, "bckd": BckdConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown train fields: {sorted(unknown)}")
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                sub_known = {f.name for f in dataclasses.fields(typ)}
                bad = set(d[key]) - sub_known
                if bad:
                    raise InvalidConfig(f"unknown {key} fields: {sorted(bad)}")
                d[key] = typ(**d[key])
        return cls(**d)


@dataclass
class SessionResult:
    state: ModelState
    trace: list[LossBreakdown]
    seconds: float
    checkpoint_path: Optional[Path] = None
    lrs: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    teacher_probe_outputs: list[np.ndarray] = field(default_factory=list)
    last_gradients: Optional[list[np.ndarray]] = None


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_min: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr_init
    return cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min)


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 2):
    """Shuffled mini-batches; a trailing batch smaller than ``min_size`` is dropped."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) >= min_size:
            yield idx


def _sgd_step(state: ModelState, loss_fn: Callable, lr: float):
    """One SGD update; ``loss_fn(params)`` returns (total tensor, dict of component tensors)."""
    mask = state.trainable_mask()
    with dm.GradTape() as tape:
        leaves = [tape.watch(p) if m else dm.Tensor(p) for p, m in zip(state.parameters, mask)]
        total, parts = loss_fn(leaves)
    grads = tape.gradient(total, leaves)
    new = [p - lr * g if m else p for p, g, m in zip(state.parameters, grads, mask)]
    return state.with_parameters(new), total.item(), {k: v.item() for k, v in parts.items()}, grads


def _mean_breakdown(rows: list[dict]) -> LossBreakdown:
    keys = rows[0].keys()
    return LossBreakdown(**{k: float(np.mean([r[k] for r in rows])) for k in keys})


def _base_loss_fn(config: ModelConfig, v1, v2, labels, loss_cfg: BaseLossConfig):
    def fn(params):
        _, z1 = forward_tensors(config, params, v1)
        _, z2 = forward_tensors(config, params, v2)
        total, sup, unsup = base_objective_tensor(z1, z2, labels, loss_cfg)
        parts = {"unsup": unsup}
        if sup is not None:
            parts["sup"] = sup
        return total, parts

    return fn


def _validation_loss(state: ModelState, x, labels, cfg: TrainConfig) -> float:
    if len(x) < 2:
        return float("nan")
    params = [dm.Tensor(p) for p in state.parameters]
    v1, v2 = augment_views(x, cfg.augment_sigma, _seed(cfg.seed, 0xBA5E, 0xFA1))
    totals, weights = [], []
    for start in range(0, len(x), cfg.batch_size):
        idx = np.arange(start, min(start + cfg.batch_size, len(x)))
        if len(idx) < 2:
            continue
        total, _ = _base_loss_fn(state.config, v1[idx], v2[idx], labels[idx], cfg.base_loss)(params)
        totals.append(total.item())
        weights.append(len(idx))
    return float(np.average(totals, weights=weights))


def train_base_session(
    stream: SessionStream,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir=None,
    state: Optional[ModelState] = None,
) -> SessionResult:
    """Labelled base session: 75/25 split, contrastive training, best-validation model kept."""
    if not len(stream):
        raise EmptyStream("stream has no sessions")
    session = stream.sessions[0]
    if not session.labelled.any():
        raise EmptyStream("session 0 has no labelled data")
    result = fit_base(session.train_x, session.visible_labels, model_cfg, train_cfg, state)
    if out_dir is not None:
        result.checkpoint_path = save_checkpoint(result.state, Path(out_dir) / "session0.ckpt", 0).path
    return result


def fit_base(x, labels, model_cfg: ModelConfig, train_cfg: TrainConfig, state: Optional[ModelState] = None) -> SessionResult:
    """Array-level base training; ``labels`` holds -1 for unlabelled rows."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not (labels >= 0).any():
        raise EmptyStream("no labelled rows")
    started = time.perf_counter()
    split_rng = np.random.default_rng(_seed(train_cfg.seed, 0x5B17))
    lab_idx = split_rng.permutation(np.flatnonzero(labels >= 0))
    n_val = int(round(0.25 * len(lab_idx)))
    val_idx = np.sort(lab_idx[:n_val])
    train_idx = np.sort(np.setdiff1d(np.arange(len(x)), val_idx))

    state = init_model(model_cfg) if state is None else state
    best_state, best_val, best_epoch = state, math.inf, None
    trace, lrs, vals = [], [], []
    grads = None
    for epoch in range(train_cfg.epochs):
        lr = epoch_lr(train_cfg, epoch)
        rng = np.random.default_rng(_seed(train_cfg.seed, 0, epoch))
        rows = []
        for step, idx in enumerate(_batches(len(train_idx), train_cfg.batch_size, rng)):
            rows_idx = train_idx[idx]
            v1, v2 = augment_views(x[rows_idx], train_cfg.augment_sigma, _seed(train_cfg.seed, 0, epoch, step))
            fn = _base_loss_fn(model_cfg, v1, v2, labels[rows_idx], train_cfg.base_loss)
            state, total, parts, grads = _sgd_step(state, fn, lr)
            rows.append({"total": total, "unsup": parts["unsup"], "sup": parts.get("sup", float("nan"))})
        trace.append(_mean_breakdown(rows))
        lrs.append(lr)
        val = _validation_loss(state, x[val_idx], labels[val_idx], train_cfg)
        vals.append(val)
        if not val >= best_val:  # also true for the first epoch when val is nan
            best_state, best_val, best_epoch = state, val, epoch
        log.debug("base epoch %d lr %.4g loss %.4f val %.4f", epoch, lr, trace[-1].total, val)
    return SessionResult(
        best_state, trace, time.perf_counter() - started, lrs=lrs, val_losses=vals, best_epoch=best_epoch,
        last_gradients=grads,
    )


def train_incremental_session(
    stream: SessionStream,
    session_id: int,
    student: ModelState,
    teacher: TeacherSnapshot,
    train_cfg: TrainConfig,
    out_dir=None,
    probe: Optional[np.ndarray] = None,
) -> SessionResult:
    """Unlabelled session: NCRL on the student's two views, distillation against the frozen teacher."""
    if session_id < 1 or session_id >= len(stream):
        raise InvalidConfig(f"session_id must lie in [1, {len(stream) - 1}], got {session_id}")
    result = fit_incremental(stream.sessions[session_id].train_x, session_id, student, teacher, train_cfg, probe)
    if out_dir is not None:
        path = Path(out_dir) / f"session{session_id}.ckpt"
        result.checkpoint_path = save_checkpoint(result.state, path, session_id).path
    return result


def fit_incremental(
    x,
    session_id: int,
    student: ModelState,
    teacher: TeacherSnapshot,
    train_cfg: TrainConfig,
    probe: Optional[np.ndarray] = None,
) -> SessionResult:
    """Array-level incremental training. There is no label argument."""
    if teacher.config.layer_shapes() != student.config.layer_shapes():
        raise TeacherShapeMismatch("teacher and student architectures differ")
    started = time.perf_counter()
    x = np.asarray(x, dtype=np.float64)
    cfg = train_cfg
    config = student.config
    prototypes = None
    if cfg.ncrl.prediction_source == "random_prototypes":
        prototypes = random_prototypes(cfg.ncrl.n_prototypes, config.head_output_dim, _seed(cfg.seed, session_id, 0x9A))

    # fixed-k neighbor selection needs more than k rows
    min_size = max(2, cfg.ncrl.k + 1) if cfg.ncrl.selection == "fixed_k" else 2
    state = student
    trace, lrs, probes = [], [], []
    grads = None
    for epoch in range(cfg.epochs):
        lr = epoch_lr(cfg, epoch)
        rng = np.random.default_rng(_seed(cfg.seed, session_id, epoch))
        rows = []
        for step, idx in enumerate(_batches(len(x), cfg.batch_size, rng, min_size)):
            step_seed = _seed(cfg.seed, session_id, epoch, step)
            v1, v2 = augment_views(x[idx], cfg.augment_sigma, step_seed)
            _, z_teacher = teacher.forward(v1)
            k_seed = _seed(cfg.seed, session_id, epoch, step, 0x43)

            def fn(params, v1=v1, v2=v2, z_teacher=z_teacher, k_seed=k_seed):
                _, z1 = forward_tensors(config, params, v1)
                _, z2 = forward_tensors(config, params, v2)
                l_ncrl = ncrl_objective(z1, z2, cfg.ncrl, prototypes=prototypes, seed=k_seed)
                pair = DistillPair(z1, z_teacher)
                l_kd = distill_tensor(pair, cfg.bckd)
                parts = {"ncrl": l_ncrl, "bckd": l_kd}
                if cfg.bckd.mode == "bckd":
                    parts["sa"] = sa_tensor(pair, cfg.bckd)
                    parts["ta"] = ta_tensor(pair, cfg.bckd)
                return blend(l_ncrl, l_kd, cfg.blend.lambda_b), parts

            state, total, parts, grads = _sgd_step(state, fn, lr)
            rows.append({"total": total, **parts})
        trace.append(_mean_breakdown(rows))
        lrs.append(lr)
        if probe is not None:
            probes.append(teacher.forward(probe)[1])
        log.debug("session %d epoch %d lr %.4g loss %.4f", session_id, epoch, lr, trace[-1].total)
    return SessionResult(
        state, trace, time.perf_counter() - started, lrs=lrs, teacher_probe_outputs=probes, last_gradients=grads
    )
