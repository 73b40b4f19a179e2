"""Session streams: synthetic generation, on-disk embedding datasets, augmentation."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import FormatError, InvalidConfig, InvariantViolation

DATASET_SCHEMA_VERSION = 1
BASE_FRACTION = 0.8


@dataclass(frozen=True)
class StreamConfig:
    base_classes: int = 8
    novel_classes_per_session: int = 2
    sessions: int = 3
    train_per_class: int = 200
    test_per_class: int = 50
    ambient_dim: int = 32
    class_separation: float = 4.0
    seed: int = 0
    labelled_fraction: float = 1.0

    def __post_init__(self):
        for name in ("base_classes", "novel_classes_per_session", "sessions", "train_per_class", "test_per_class", "ambient_dim"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.labelled_fraction <= 1.0:
            raise InvalidConfig(f"labelled_fraction must lie in (0, 1], got {self.labelled_fraction}")
        if not self.class_separation > 0:
            raise InvalidConfig(f"class_separation must be > 0, got {self.class_separation}")

    @property
    def total_classes(self) -> int:
        return self.base_classes + self.novel_classes_per_session * self.sessions


class SealedLabels:
    """True labels the trainer must not look at; every :meth:`reveal` is counted."""

    def __init__(self, labels: np.ndarray):
        self._labels = np.asarray(labels, dtype=np.int64).copy()
        self._labels.setflags(write=False)
        self.reads = 0

    def __len__(self):
        return len(self._labels)

    def reveal(self) -> np.ndarray:
        self.reads += 1
        return self._labels

    def __repr__(self):
        return f"SealedLabels(n={len(self)}, reads={self.reads})"


@dataclass
class Session:
    session_id: int
    train_x: np.ndarray
    train_labels: SealedLabels
    labelled: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_ids: tuple
    train_ids: Optional[np.ndarray] = None

    @property
    def visible_labels(self) -> np.ndarray:
        """Labels of labelled rows, -1 elsewhere. Only the base session exposes any."""
        if not self.labelled.any():
            return np.full(len(self.train_x), -1, dtype=np.int64)
        out = np.full(len(self.train_x), -1, dtype=np.int64)
        out[self.labelled] = self.train_labels._labels[self.labelled]
        return out


@dataclass
class SessionStream:
    sessions: list[Session]
    ambient_dim: int
    config: Optional[StreamConfig] = field(default=None)

    def __post_init__(self):
        validate_stream(self)

    def __len__(self):
        return len(self.sessions)

    @property
    def label_spaces(self) -> list[tuple]:
        return [s.class_ids for s in self.sessions]

    def novel_classes(self, t: int) -> tuple:
        prev = set(self.sessions[t - 1].class_ids) if t > 0 else set()
        return tuple(c for c in self.sessions[t].class_ids if c not in prev)

    def test_set(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Cumulative test data of sessions 0..t."""
        xs = [s.test_x for s in self.sessions[: t + 1]]
        ys = [s.test_y for s in self.sessions[: t + 1]]
        return np.concatenate(xs), np.concatenate(ys)

    def label_reads(self, sessions=None) -> int:
        idx = range(1, len(self.sessions)) if sessions is None else sessions
        return sum(self.sessions[t].train_labels.reads for t in idx)


def validate_stream(stream: SessionStream) -> None:
    if not stream.sessions:
        raise InvariantViolation("stream has no sessions")
    seen_rows: dict[bytes, int] = {}
    for t, s in enumerate(stream.sessions):
        if s.session_id != t:
            raise InvariantViolation(f"session {t}: id {s.session_id} out of order")
        if s.train_x.ndim != 2 or s.train_x.shape[1] != stream.ambient_dim:
            raise InvariantViolation(f"session {t}: train_x shape {s.train_x.shape} vs ambient_dim {stream.ambient_dim}")
        if s.test_x.ndim != 2 or s.test_x.shape[1] != stream.ambient_dim:
            raise InvariantViolation(f"session {t}: test_x shape {s.test_x.shape} vs ambient_dim {stream.ambient_dim}")
        if len(s.train_labels) != len(s.train_x) or len(s.labelled) != len(s.train_x):
            raise InvariantViolation(f"session {t}: train labels/flags do not match train rows")
        if len(s.test_y) != len(s.test_x):
            raise InvariantViolation(f"session {t}: test labels do not match test rows")
        space = set(s.class_ids)
        if t > 0:
            prev = set(stream.sessions[t - 1].class_ids)
            if not prev < space:
                raise InvariantViolation(f"session {t}: label space is not a strict superset of session {t - 1}'s")
        if not set(np.unique(s.train_labels._labels)).issubset(space):
            raise InvariantViolation(f"session {t}: train labels outside class_ids")
        if not set(np.unique(s.test_y)).issubset(space):
            raise InvariantViolation(f"session {t}: test labels outside class_ids")
        for row in np.ascontiguousarray(s.train_x):
            key = row.tobytes()
            owner = seen_rows.setdefault(key, t)
            if owner != t:
                raise InvariantViolation(f"session {t}: train instance also present in session {owner}")
    if not stream.sessions[0].labelled.any():
        raise InvariantViolation("session 0 has no labelled instances")


def _rng(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), purpose]))


def generate_synthetic_stream(cfg: StreamConfig) -> SessionStream:
    """Gaussian class clusters split into a labelled base session and unlabelled incremental sessions.

    Each class mean is a random unit direction times ``class_separation``,
    so separation is measured in units of the (unit, isotropic) noise. 80%
    of a class's training pool lands in the session that introduces it; the
    rest is spread over later sessions as "seen class" data. Values are float32-representable so an exported stream re-loads
    exactly.
    """
    rng = _rng(cfg.seed, 0x5E55)
    C, D, T = cfg.total_classes, cfg.ambient_dim, cfg.sessions
    directions = rng.normal(size=(C, D))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = directions * cfg.class_separation

    intro = np.array([0] * cfg.base_classes + [1 + i // cfg.novel_classes_per_session for i in range(C - cfg.base_classes)])
    n_first = int(round(BASE_FRACTION * cfg.train_per_class))

    def draw(c, n):
        return (means[c] + rng.normal(size=(n, D))).astype(np.float32).astype(np.float64)

    train_parts: list[list] = [[] for _ in range(T + 1)]
    test_parts: list[list] = [[] for _ in range(T + 1)]
    next_id = 0
    for c in range(C):
        pool = draw(c, cfg.train_per_class)
        ids = np.arange(next_id, next_id + cfg.train_per_class)
        next_id += cfg.train_per_class
        t0 = intro[c]
        train_parts[t0].append((pool[:n_first], c, ids[:n_first]))
        later = list(range(t0 + 1, T + 1))
        if later:
            for t, chunk, chunk_ids in zip(
                later, np.array_split(pool[n_first:], len(later)), np.array_split(ids[n_first:], len(later))
            ):
                train_parts[t].append((chunk, c, chunk_ids))
        test_parts[t0].append((draw(c, cfg.test_per_class), c))

    label_rng = _rng(cfg.seed, 0x1AB1)
    sessions = []
    for t in range(T + 1):
        x = np.concatenate([p[0] for p in train_parts[t]])
        y = np.concatenate([np.full(len(p[0]), p[1]) for p in train_parts[t]])
        ids = np.concatenate([p[2] for p in train_parts[t]])
        order = _rng(cfg.seed, 0x0D00 + t).permutation(len(x))
        x, y, ids = x[order], y[order], ids[order]
        labelled = np.zeros(len(x), dtype=bool)
        if t == 0:
            for c in np.unique(y):
                rows = np.flatnonzero(y == c)
                n_lab = max(1, int(round(cfg.labelled_fraction * len(rows))))
                labelled[label_rng.permutation(rows)[:n_lab]] = True
        tx = np.concatenate([p[0] for p in test_parts[t]])
        ty = np.concatenate([np.full(len(p[0]), p[1]) for p in test_parts[t]])
        sessions.append(
            Session(
                session_id=t,
                train_x=x,
                train_labels=SealedLabels(y),
                labelled=labelled,
                test_x=tx,
                test_y=ty.astype(np.int64),
                class_ids=tuple(int(c) for c in range(C) if intro[c] <= t),
                train_ids=ids,
            )
        )
    stream = SessionStream(sessions, D, cfg)
    check_disjoint_ids(stream)
    return stream


def check_disjoint_ids(stream: SessionStream) -> None:
    seen = set()
    for s in stream.sessions:
        if s.train_ids is None:
            continue
        ids = set(s.train_ids.tolist())
        if seen & ids:
            raise InvariantViolation(f"session {s.session_id}: train ids overlap earlier sessions")
        seen |= ids


# --- on-disk format ------------------------------------------------------------------


def _split_files(t: int, split: str) -> dict:
    stem = f"session{t}_{split}"
    return {"x": f"{stem}.f32", "y": f"{stem}.labels.i32", "flags": f"{stem}.labelled.bits"}


def save_embedding_dataset(stream: SessionStream, path) -> Path:
    """Write ``manifest.json`` plus little-endian float32/int32/bitmap files per session and split."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in stream.sessions:
        splits = {
            "train": (s.train_x, s.train_labels._labels, s.labelled),
            "test": (s.test_x, s.test_y, np.ones(len(s.test_y), dtype=bool)),
        }
        for split, (x, y, flags) in splits.items():
            files = _split_files(s.session_id, split)
            (root / files["x"]).write_bytes(np.ascontiguousarray(x, dtype="<f4").tobytes())
            (root / files["y"]).write_bytes(np.ascontiguousarray(y, dtype="<i4").tobytes())
            (root / files["flags"]).write_bytes(np.packbits(flags.astype(np.uint8), bitorder="little").tobytes())
        entries.append(
            {
                "id": s.session_id,
                "train_count": int(len(s.train_x)),
                "test_count": int(len(s.test_x)),
                "class_ids": [int(c) for c in s.class_ids],
                "labelled_count": int(s.labelled.sum()),
            }
        )
    manifest = {"schema_version": DATASET_SCHEMA_VERSION, "ambient_dim": int(stream.ambient_dim), "sessions": entries}
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, root / "manifest.json")
    return root


def _read(path: Path, dtype, count: int, where: str) -> np.ndarray:
    raw = path.read_bytes()
    arr = np.frombuffer(raw, dtype=dtype)
    if arr.size != count:
        raise FormatError(f"{where}: {path.name} holds {arr.size} values, expected {count}")
    return arr


def load_embedding_dataset(path) -> SessionStream:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json: {exc}") from exc
    for key in ("schema_version", "ambient_dim", "sessions"):
        if key not in manifest:
            raise FormatError(f"manifest.json: missing field {key!r}")
    if manifest["schema_version"] != DATASET_SCHEMA_VERSION:
        raise FormatError(f"manifest.json: schema_version {manifest['schema_version']} unsupported")
    D = int(manifest["ambient_dim"])
    sessions = []
    for t, entry in enumerate(manifest["sessions"]):
        where = f"session {t}"
        for key in ("id", "train_count", "test_count", "class_ids", "labelled_count"):
            if key not in entry:
                raise FormatError(f"{where}: missing field {key!r}")
        arrays = {}
        for split, count in (("train", entry["train_count"]), ("test", entry["test_count"])):
            files = _split_files(entry["id"], split)
            x = _read(root / files["x"], "<f4", count * D, f"{where} {split}").reshape(count, D).astype(np.float64)
            y = _read(root / files["y"], "<i4", count, f"{where} {split}").astype(np.int64)
            bits = np.frombuffer((root / files["flags"]).read_bytes(), dtype=np.uint8)
            flags = np.unpackbits(bits, bitorder="little")[:count].astype(bool)
            if flags.size != count:
                raise FormatError(f"{where} {split}: labelled bitmap too short")
            arrays[split] = (x, y, flags)
        x, y, flags = arrays["train"]
        if int(flags.sum()) != entry["labelled_count"]:
            raise FormatError(f"{where}: labelled_count {entry['labelled_count']} but bitmap has {int(flags.sum())}")
        sessions.append(
            Session(
                session_id=int(entry["id"]),
                train_x=x,
                train_labels=SealedLabels(y),
                labelled=flags,
                test_x=arrays["test"][0],
                test_y=arrays["test"][1],
                class_ids=tuple(int(c) for c in entry["class_ids"]),
            )
        )
    return SessionStream(sessions, D)


# --- augmentation --------------------------------------------------------------------


def augment_views(instances, sigma: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independent Gaussian jitters of every row.

    Offsets come from ``default_rng(SeedSequence([seed, 0xA06]))``: first
    the whole view-1 noise matrix, then view 2.
    """
    if not sigma > 0:
        raise InvalidConfig(f"sigma must be > 0, got {sigma}")
    x = np.asarray(instances, dtype=np.float64)
    rng = _rng(seed, 0xA06)
    n1 = rng.standard_normal(x.shape)
    n2 = rng.standard_normal(x.shape)
    return x + sigma * n1, x + sigma * n2


def stream_config_from_dict(d: dict) -> StreamConfig:
    known = {f.name for f in dataclasses.fields(StreamConfig)}
    unknown = set(d) - known
    if unknown:
        raise InvalidConfig(f"unknown stream fields: {sorted(unknown)}")
    return StreamConfig(**d)
