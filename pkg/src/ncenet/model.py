"""MLP encoder plus 3-layer projection head, with teacher snapshots and checkpoints."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .exceptions import HashMismatch, InvalidConfig, SchemaMismatch, ShapeMismatch

SCHEMA_VERSION = 1
TRAINABLE_SCOPES = ("all", "last_block_and_head")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 32
    encoder_dims: tuple[int, ...] = (32, 32)
    feature_dim: int = 32
    head_hidden_dim: int = 64
    head_output_dim: int = 128
    trainable_scope: str = "last_block_and_head"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_dims", tuple(int(d) for d in self.encoder_dims))
        if not self.encoder_dims:
            raise InvalidConfig("encoder_dims must be non-empty")
        dims = (self.input_dim, *self.encoder_dims, self.feature_dim, self.head_hidden_dim, self.head_output_dim)
        if any(int(d) < 1 for d in dims):
            raise InvalidConfig(f"all dimensions must be >= 1, got {dims}")
        if self.encoder_dims[-1] != self.feature_dim:
            raise InvalidConfig(
                f"feature_dim ({self.feature_dim}) must equal the last encoder width ({self.encoder_dims[-1]})"
            )
        if self.trainable_scope not in TRAINABLE_SCOPES:
            raise InvalidConfig(f"trainable_scope must be one of {TRAINABLE_SCOPES}, got {self.trainable_scope!r}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for every linear layer: encoder first, then head."""
        enc = [self.input_dim, *self.encoder_dims]
        head = [self.feature_dim, self.head_hidden_dim, self.head_hidden_dim, self.head_output_dim]
        return list(zip(enc[:-1], enc[1:])) + list(zip(head[:-1], head[1:]))

    @property
    def n_encoder_layers(self) -> int:
        return len(self.encoder_dims)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_dims"] = list(self.encoder_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelState:
    config: ModelConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        shapes = self.config.layer_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ShapeMismatch(f"expected {len(shapes)} layers, got {len(self.weights)}")
        for i, ((fan_in, fan_out), w, b) in enumerate(zip(shapes, self.weights, self.biases)):
            if w.shape != (fan_in, fan_out) or b.shape != (1, fan_out):
                raise ShapeMismatch(f"layer {i}: weight {w.shape}, bias {b.shape}, expected ({fan_in}, {fan_out})")

    @property
    def parameters(self) -> list[np.ndarray]:
        """Interleaved [W0, b0, W1, b1, ...] in declared layer order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters)

    def trainable_mask(self) -> list[bool]:
        """One flag per entry of :attr:`parameters`."""
        n_enc = self.config.n_encoder_layers
        flags = []
        for layer in range(len(self.weights)):
            trainable = self.config.trainable_scope == "all" or layer >= n_enc - 1
            flags += [trainable, trainable]
        return flags

    def with_parameters(self, params: Sequence[np.ndarray]) -> "ModelState":
        params = [np.array(p, dtype=np.float64) for p in params]
        return ModelState(self.config, params[0::2], params[1::2], self.schema_version)

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def forward(self, inputs, scope: str = "features_and_projection"):
        return forward(self, inputs, scope)


def init_model(config: ModelConfig) -> ModelState:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x1A17]))
    weights, biases = [], []
    for fan_in, fan_out in config.layer_shapes():
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros((1, fan_out)))
    return ModelState(config, weights, biases)


def forward_tensors(config: ModelConfig, params: Sequence, inputs, project: bool = True):
    """Forward pass over Tensor parameters; returns (features, projected or None)."""
    x = dm.as_tensor(inputs)
    if x.shape[1] != config.input_dim:
        raise ShapeMismatch(f"inputs have {x.shape[1]} columns, model expects {config.input_dim}")
    n_enc = config.n_encoder_layers
    n_layers = len(params) // 2
    h = x
    for layer in range(n_enc):
        h = dm.add(dm.matmul(h, params[2 * layer]), params[2 * layer + 1])
        if layer < n_enc - 1:
            h = dm.gelu(h)
    features = h
    if not project:
        return features, None
    for layer in range(n_enc, n_layers):
        h = dm.add(dm.matmul(h, params[2 * layer]), params[2 * layer + 1])
        if layer < n_layers - 1:
            h = dm.gelu(h)
    return features, dm.l2_normalize_rows(h)


def forward(state: ModelState, inputs, scope: str = "features_and_projection"):
    """Numpy-level forward. ``scope`` is ``features_only`` or ``features_and_projection``."""
    if scope not in ("features_only", "features_and_projection"):
        raise InvalidConfig(f"unknown scope {scope!r}")
    features, projected = forward_tensors(
        state.config,
        [dm.Tensor(p) for p in state.parameters],
        inputs,
        project=scope == "features_and_projection",
    )
    return features.numpy(), None if projected is None else projected.numpy()


class TeacherSnapshot:
    """Frozen copy of a model taken at the end of a session."""

    def __init__(self, state: ModelState, session_id: int | None = None):
        self._state = state.copy()
        for p in self._state.parameters:
            p.setflags(write=False)
        self.session_id = session_id

    @property
    def config(self) -> ModelConfig:
        return self._state.config

    @property
    def parameters(self) -> list[np.ndarray]:
        return self._state.parameters

    def forward(self, inputs, scope: str = "features_and_projection"):
        return forward(self._state, inputs, scope)

    def as_state(self) -> ModelState:
        return self._state.copy()


def snapshot_teacher(state: ModelState, session_id: int | None = None) -> TeacherSnapshot:
    return TeacherSnapshot(state, session_id)


# --- checkpoints -----------------------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    path: Path
    manifest: dict = field(default_factory=dict)


def _payload(state: ModelState) -> bytes:
    return b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in state.parameters)


def save_checkpoint(state: ModelState, path, session_id: int | None = None) -> Checkpoint:
    """Write ``<json manifest>\\n<float64 LE payload>`` atomically."""
    path = Path(path)
    payload = _payload(state)
    manifest = {
        "schema_version": state.schema_version,
        "model_config": state.config.to_dict(),
        "session_id": session_id,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header + b"\n" + payload)
    os.replace(tmp, path)
    return Checkpoint(path, manifest)


def read_checkpoint_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    header, sep, payload = raw.partition(b"\n")
    if not sep:
        raise SchemaMismatch(f"{path}: missing manifest separator")
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaMismatch(f"{path}: unreadable manifest ({exc})") from exc
    return manifest, payload


def load_checkpoint(path) -> ModelState:
    manifest, payload = read_checkpoint_manifest(path)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatch(f"{path}: schema_version {manifest.get('schema_version')} != {SCHEMA_VERSION}")
    if hashlib.sha256(payload).hexdigest() != manifest.get("sha256"):
        raise HashMismatch(f"{path}: payload hash does not match manifest")
    config = ModelConfig.from_dict(manifest["model_config"])
    flat = np.frombuffer(payload, dtype="<f8")
    params, offset = [], 0
    for fan_in, fan_out in config.layer_shapes():
        for shape in ((fan_in, fan_out), (1, fan_out)):
            size = shape[0] * shape[1]
            params.append(flat[offset : offset + size].reshape(shape).astype(np.float64))
            offset += size
    if offset != flat.size:
        raise SchemaMismatch(f"{path}: payload holds {flat.size} values, config needs {offset}")
    return ModelState(config, params[0::2], params[1::2])
