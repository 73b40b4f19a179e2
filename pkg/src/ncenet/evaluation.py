"""Clustering evaluation: k-means on encoder features, Hungarian-matched accuracy, reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .exceptions import EmptyInput, InvalidConfig, KTooLarge, LengthMismatch

INITS = ("maximin", "random")


@dataclass(frozen=True)
class KmeansConfig:
    K: int = 8
    max_iters: int = 100
    restarts: int = 4
    seed: int = 0
    init: str = "maximin"
    normalize: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise InvalidConfig(f"K must be >= 1, got {self.K}")
        if self.restarts < 1:
            raise InvalidConfig(f"restarts must be >= 1, got {self.restarts}")
        if self.max_iters < 1:
            raise InvalidConfig(f"max_iters must be >= 1, got {self.max_iters}")
        if self.init not in INITS:
            raise InvalidConfig(f"init must be one of {INITS}, got {self.init!r}")


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    K: int
    centroids: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _init_centroids(x, K, rng, init):
    n = x.shape[0]
    if init == "random":
        return x[rng.choice(n, size=K, replace=False)].copy()
    # farthest-first from a random start
    idx = [int(rng.integers(n))]
    closest = _sq_dists(x, x[idx]).ravel()
    for _ in range(1, K):
        nxt = int(np.argmax(closest))
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[nxt : nxt + 1]).ravel())
    return x[idx].copy()


def _lloyd(x, centroids, max_iters):
    history = []
    labels = None
    for _ in range(max_iters):
        d = _sq_dists(x, centroids)
        new_labels = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for k in range(centroids.shape[0]):
            members = x[labels == k]
            if len(members):
                centroids[k] = members.mean(axis=0)
    d = _sq_dists(x, centroids)
    labels = d.argmin(axis=1)
    inertia = float(d[np.arange(len(x)), labels].sum())
    history.append(inertia)
    return labels, centroids, inertia, history


def kmeans_cluster(features, cfg: KmeansConfig) -> ClusterAssignment:
    """Lloyd's algorithm, best of ``cfg.restarts`` seeded runs by within-cluster sum of squares."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInput("features must be a non-empty 2-D array")
    if cfg.K > x.shape[0]:
        raise KTooLarge(f"K={cfg.K} exceeds {x.shape[0]} instances")
    if cfg.normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.maximum(norms, 1e-12)
    best = None
    for r in range(cfg.restarts):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, r, 0x4B4D]))
        labels, cents, inertia, hist = _lloyd(x, _init_centroids(x, cfg.K, rng, cfg.init), cfg.max_iters)
        # strict < keeps the lowest restart index among ties
        if best is None or inertia < best.inertia:
            best = ClusterAssignment(labels, cfg.K, cents, inertia, hist)
    return best


def _contingency(y_true, y_pred):
    classes, t = np.unique(y_true, return_inverse=True)
    clusters, p = np.unique(y_pred, return_inverse=True)
    table = np.zeros((len(clusters), len(classes)), dtype=np.int64)
    np.add.at(table, (p, t), 1)
    return table, clusters, classes


def hungarian_acc(y_true, y_pred) -> tuple[float, dict]:
    """Best accuracy over one-to-one cluster-to-class matchings, and that matching."""
    y_true = np.asarray(y_true).ravel()
    y_pred = np.asarray(y_pred).ravel()
    if y_true.shape != y_pred.shape:
        raise LengthMismatch(f"{y_true.size} true labels vs {y_pred.size} predictions")
    if y_true.size == 0:
        raise EmptyInput("no instances to score")
    table, clusters, classes = _contingency(y_true, y_pred)
    size = max(table.shape)
    padded = np.zeros((size, size), dtype=np.int64)
    padded[: table.shape[0], : table.shape[1]] = table
    rows, cols = linear_sum_assignment(padded, maximize=True)
    mapping = {
        int(clusters[r]): int(classes[c])
        for r, c in zip(rows, cols)
        if r < len(clusters) and c < len(classes)
    }
    return float(padded[rows, cols].sum()) / y_true.size, mapping


def apply_mapping(y_pred, mapping: dict) -> np.ndarray:
    """Matched class per prediction; -1 where the cluster has no match."""
    return np.array([mapping.get(int(c), -1) for c in np.asarray(y_pred).ravel()], dtype=np.int64)


def subset_acc(y_true, y_pred, mapping: dict, old_class_set) -> tuple[Optional[float], Optional[float]]:
    """Old/New accuracy under a matching computed on the whole test set; None for empty subsets."""
    y_true = np.asarray(y_true).ravel()
    hits = apply_mapping(y_pred, mapping) == y_true
    old = np.isin(y_true, np.fromiter(old_class_set, dtype=np.int64))
    acc_old = float(hits[old].mean()) if old.any() else None
    acc_new = float(hits[~old].mean()) if (~old).any() else None
    return acc_old, acc_new


def subset_acc_rematched(y_true, y_pred, old_class_set) -> tuple[Optional[float], Optional[float]]:
    """Variant that re-solves the matching separately on each subset."""
    y_true = np.asarray(y_true).ravel()
    y_pred = np.asarray(y_pred).ravel()
    old = np.isin(y_true, np.fromiter(old_class_set, dtype=np.int64))
    acc_old = hungarian_acc(y_true[old], y_pred[old])[0] if old.any() else None
    acc_new = hungarian_acc(y_true[~old], y_pred[~old])[0] if (~old).any() else None
    return acc_old, acc_new


def confusion_matrix(y_true, y_pred, mapping: dict, classes: Sequence[int]) -> np.ndarray:
    """Rows: true class; columns: matched class (last column collects unmatched clusters)."""
    classes = list(classes)
    pos = {c: i for i, c in enumerate(classes)}
    out = np.zeros((len(classes), len(classes) + 1), dtype=np.int64)
    for t, m in zip(np.asarray(y_true).ravel(), apply_mapping(y_pred, mapping)):
        out[pos[int(t)], pos.get(int(m), len(classes))] += 1
    return out


@dataclass
class EvalReport:
    session_id: int
    acc_all: float
    acc_old: Optional[float]
    acc_new: Optional[float]
    M: int
    mapping: dict
    per_class_recall: dict
    mA: Optional[float] = None
    mO: Optional[float] = None
    mN: Optional[float] = None
    confusion: Optional[np.ndarray] = None
    classes: tuple = ()


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def running_means(reports: Sequence[EvalReport]) -> tuple[Optional[float], Optional[float], Optional[float]]:
    """mA/mO/mN over the incremental sessions (id >= 1) among ``reports``."""
    inc = [r for r in reports if r.session_id >= 1]
    return _mean(r.acc_all for r in inc), _mean(r.acc_old for r in inc), _mean(r.acc_new for r in inc)


def score_predictions(session_id, y_true, y_pred, old_classes, classes, previous=(), rematch=False) -> EvalReport:
    y_true = np.asarray(y_true).ravel()
    acc, mapping = hungarian_acc(y_true, y_pred)
    if rematch:
        acc_old, acc_new = subset_acc_rematched(y_true, y_pred, old_classes)
    else:
        acc_old, acc_new = subset_acc(y_true, y_pred, mapping, old_classes)
    hits = apply_mapping(y_pred, mapping) == y_true
    recall = {int(c): float(hits[y_true == c].mean()) for c in classes if (y_true == c).any()}
    report = EvalReport(
        session_id=int(session_id),
        acc_all=acc,
        acc_old=acc_old,
        acc_new=acc_new,
        M=int(y_true.size),
        mapping=mapping,
        per_class_recall=recall,
        confusion=confusion_matrix(y_true, y_pred, mapping, classes),
        classes=tuple(int(c) for c in classes),
    )
    report.mA, report.mO, report.mN = running_means([*previous, report])
    return report


def session_report(stream, model, session_id: int, cfg: KmeansConfig, previous=(), rematch=False) -> EvalReport:
    """Cluster the cumulative test set of ``session_id`` with K = number of classes seen so far."""
    from .model import forward

    x, y = stream.test_set(session_id)
    feats, _ = forward(model, x, "features_only")
    classes = stream.label_spaces[session_id]
    old = stream.label_spaces[session_id - 1] if session_id > 0 else classes
    km = kmeans_cluster(feats, KmeansConfig(**{**cfg.__dict__, "K": len(classes)}))
    return score_predictions(session_id, y, km.labels, old, classes, previous, rematch)


# --- CSV export --------------------------------------------------------------------------

REPORT_COLUMNS = ("session", "acc_all", "acc_old", "acc_new", "mA", "mO", "mN")


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow([r.session_id, _fmt(r.acc_all), _fmt(r.acc_old), _fmt(r.acc_new), _fmt(r.mA), _fmt(r.mO), _fmt(r.mN)])
    return buf.getvalue()


def confusion_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true_class", *[f"matched_{c}" for c in report.classes], "unmatched"])
    for c, row in zip(report.classes, report.confusion):
        w.writerow([c, *row.tolist()])
    return buf.getvalue()
