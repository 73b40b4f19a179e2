"""Run configuration, profiles, and end-to-end stream runs with on-disk artifacts."""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import json
import os
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from .data import SessionStream, StreamConfig, generate_synthetic_stream, load_embedding_dataset, stream_config_from_dict
from .evaluation import EvalReport, KmeansConfig, confusion_to_csv, reports_to_csv, session_report
from .exceptions import InvalidConfig
from .model import ModelConfig, ModelState, save_checkpoint, snapshot_teacher
from .training import SessionResult, TrainConfig, train_base_session, train_incremental_session

SEED_ENV = "CGCD_SEED"
SECTIONS = ("stream", "model", "base", "incremental", "eval")
TOP_LEVEL = (*SECTIONS, "profile", "seed", "dataset", "sweep", "ablation")

# Desk runs train every layer: there is no pretrained backbone to keep frozen.
PROFILES: dict[str, dict] = {
    "desk": {
        "stream": {},
        "model": {"trainable_scope": "all"},
        "base": {"batch_size": 128, "epochs": 30, "lr_init": 0.2, "augment_sigma": 0.3},
        "incremental": {"batch_size": 32, "epochs": 30, "lr_init": 0.1, "augment_sigma": 0.3},
        "eval": {"restarts": 10},
    },
    "paper": {
        "stream": {},
        "model": {"trainable_scope": "last_block_and_head"},
        "base": {"batch_size": 128, "epochs": 50, "lr_init": 0.01, "augment_sigma": 0.3},
        "incremental": {"batch_size": 128, "epochs": 20, "lr_init": 0.0001, "augment_sigma": 0.3},
        "eval": {"restarts": 10},
    },
}

ABLATIONS: dict[str, dict] = {
    "full": {},
    "no_ncrl": {"incremental.blend.lambda_b": 0.0},
    "no_bckd": {"incremental.blend.lambda_b": 1.0},
    "sa_only": {"incremental.bckd.mode": "sa_only"},
    "ta_only": {"incremental.bckd.mode": "ta_only"},
    "mse": {"incremental.bckd.mode": "mse"},
    "kl": {"incremental.bckd.mode": "kl"},
    "threshold": {"incremental.ncrl.selection": "threshold"},
    "random_prototypes": {"incremental.ncrl.prediction_source": "random_prototypes"},
    "kmeans_centroids": {"incremental.ncrl.prediction_source": "kmeans_centroids"},
}
DEFAULT_ABLATION = ("full", "no_ncrl", "no_bckd")


# --- configuration -------------------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def set_path(d: dict, dotted: str, value) -> dict:
    """Copy of ``d`` with ``a.b.c`` set to ``value``."""
    out = copy.deepcopy(d)
    keys = dotted.split(".")
    if keys[0] not in SECTIONS:
        raise InvalidConfig(f"cannot patch {dotted!r}: first key must be one of {SECTIONS}")
    node = out
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise InvalidConfig(f"cannot patch {dotted!r}: {key!r} is not a section")
    node[keys[-1]] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    stream: StreamConfig
    model: ModelConfig
    base: TrainConfig
    incremental: TrainConfig
    eval: KmeansConfig
    profile: str = "desk"
    seed: Optional[int] = None
    dataset: Optional[str] = None
    sweep: Optional[dict] = None
    ablation: tuple = DEFAULT_ABLATION
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def to_dict(self) -> dict:
        """Resolved snapshot; feeding it back to :func:`resolve_config` reproduces this config."""
        return {
            "profile": self.profile,
            "seed": self.seed,
            "dataset": self.dataset,
            "stream": dataclasses.asdict(self.stream),
            "model": self.model.to_dict(),
            "base": self.base.to_dict(),
            "incremental": self.incremental.to_dict(),
            "eval": {k: v for k, v in dataclasses.asdict(self.eval).items() if k != "K"},
            "sweep": self.sweep,
            "ablation": list(self.ablation),
        }

    def patched(self, patch: dict) -> "RunConfig":
        d = self.to_dict()
        for key, val in patch.items():
            d = set_path(d, key, val)
        return resolve_config(d, profile=self.profile, use_env=False)


def _section(name: str, d: dict, build):
    try:
        return build(d)
    except InvalidConfig as exc:
        raise InvalidConfig(f"{name}: {exc}") from None
    except TypeError as exc:
        raise InvalidConfig(f"{name}: {exc}") from None


def _kmeans(d: dict) -> KmeansConfig:
    known = {f.name for f in dataclasses.fields(KmeansConfig)} - {"K"}
    bad = set(d) - known
    if bad:
        raise InvalidConfig(f"unknown eval fields: {sorted(bad)}")
    return KmeansConfig(**d)


def _model(d: dict) -> ModelConfig:
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    bad = set(d) - known
    if bad:
        raise InvalidConfig(f"unknown model fields: {sorted(bad)}")
    return ModelConfig.from_dict(d)


def resolve_seed(file_seed: Optional[int], cli_seed: Optional[int] = None, use_env: bool = True) -> Optional[int]:
    """Precedence: command-line flag, then the CGCD_SEED variable, then the config file."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV) if use_env else None
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise InvalidConfig(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return None if file_seed is None else int(file_seed)


def resolve_config(
    raw: Optional[dict] = None, profile: Optional[str] = None, seed: Optional[int] = None, use_env: bool = True
) -> RunConfig:
    """Profile defaults, overlaid with ``raw``, with the resolved seed pushed into every section.

    ``use_env=False`` ignores CGCD_SEED, which replaying a manifest needs.
    """
    raw = dict(raw or {})
    unknown = set(raw) - set(TOP_LEVEL)
    if unknown:
        raise InvalidConfig(f"unknown top-level fields: {sorted(unknown)}")
    profile = profile or raw.get("profile") or "desk"
    if profile not in PROFILES:
        raise InvalidConfig(f"profile must be one of {sorted(PROFILES)}, got {profile!r}")
    merged = _merge(PROFILES[profile], {k: v for k, v in raw.items() if k in SECTIONS})
    for name in SECTIONS:
        if not isinstance(merged.get(name, {}), dict):
            raise InvalidConfig(f"{name} must be an object")
    run_seed = resolve_seed(raw.get("seed"), seed, use_env)
    if run_seed is not None:
        for name in SECTIONS:
            merged[name] = {**merged.get(name, {}), "seed": run_seed}

    ablation = tuple(raw.get("ablation") or DEFAULT_ABLATION)
    bad = [a for a in ablation if a not in ABLATIONS]
    if bad:
        raise InvalidConfig(f"ablation: unknown variants {bad}; choose from {sorted(ABLATIONS)}")
    sweep = raw.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, dict) or set(sweep) != {"param", "values"} or not sweep["values"]:
            raise InvalidConfig("sweep must be {\"param\": <dotted path>, \"values\": [non-empty list]}")
        set_path(merged, sweep["param"], sweep["values"][0])

    return RunConfig(
        stream=_section("stream", merged["stream"], stream_config_from_dict),
        model=_section("model", merged["model"], _model),
        base=_section("base", merged["base"], TrainConfig.from_dict),
        incremental=_section("incremental", merged["incremental"], TrainConfig.from_dict),
        eval=_section("eval", merged["eval"], _kmeans),
        profile=profile,
        seed=run_seed,
        dataset=raw.get("dataset"),
        sweep=sweep,
        ablation=ablation,
        raw=raw,
    )


def load_config(path, profile: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    """Read a JSON config file. The file itself is never modified."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise InvalidConfig(f"config {path} must hold a JSON object")
    return resolve_config(raw, profile, seed)


# --- runs ----------------------------------------------------------------------------

TRACE_COLUMNS = ("session", "epoch", "lr", "total", "sup", "unsup", "ncrl", "sa", "ta", "bckd", "val_loss")
SUMMARY_COLUMNS = ("point", "final_session", "acc_all", "acc_old", "acc_new", "mA", "mO", "mN")


def build_stream(cfg: RunConfig) -> SessionStream:
    if cfg.dataset:
        return load_embedding_dataset(cfg.dataset)
    return generate_synthetic_stream(cfg.stream)


def _num(v) -> str:
    if v is None or v != v:
        return ""
    return repr(float(v))


def _trace_rows(session_id: int, result: SessionResult) -> list[list]:
    rows = []
    for epoch, item in enumerate(result.trace):
        val = result.val_losses[epoch] if epoch < len(result.val_losses) else None
        d = item.as_dict()
        rows.append(
            [session_id, epoch, _num(result.lrs[epoch])]
            + [_num(d[k]) for k in ("total", "sup", "unsup", "ncrl", "sa", "ta", "bckd")]
            + [_num(val)]
        )
    return rows


def _write_text(path: Path, text: str) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="")
    os.replace(tmp, path)
    return path


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


@dataclass
class StreamRun:
    reports: list[EvalReport]
    states: list[ModelState]
    trace_rows: list[list]
    artifacts: list[Path] = field(default_factory=list)

    @property
    def final(self) -> EvalReport:
        return self.reports[-1]

    def summary_row(self, point: str = "") -> list:
        r = self.final
        return [point, r.session_id, *(_fmt6(v) for v in (r.acc_all, r.acc_old, r.acc_new, r.mA, r.mO, r.mN))]


def _fmt6(v) -> str:
    return "" if v is None else f"{v:.6f}"


@dataclass
class BaseRun:
    stream: SessionStream
    result: SessionResult
    report: EvalReport


def run_base(cfg: RunConfig, out_dir=None, stream: Optional[SessionStream] = None) -> BaseRun:
    """Train and evaluate session 0; writes session0.ckpt and loss_trace.csv when ``out_dir`` is set."""
    stream = stream if stream is not None else build_stream(cfg)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    result = train_base_session(stream, cfg.model, cfg.base, out_dir)
    report = session_report(stream, result.state, 0, cfg.eval)
    if out_dir is not None:
        _write_text(Path(out_dir) / "loss_trace.csv", _csv(_trace_rows(0, result), TRACE_COLUMNS))
    return BaseRun(stream, result, report)


def run_incremental(cfg: RunConfig, base: BaseRun, out_dir=None) -> StreamRun:
    """All incremental sessions on top of a trained base, evaluating after every session."""
    stream = base.stream
    out = Path(out_dir) if out_dir is not None else None
    artifacts = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        artifacts.append(save_checkpoint(base.result.state, out / "session0.ckpt", 0).path)
    state = base.result.state
    reports, states = [base.report], [state]
    trace = _trace_rows(0, base.result)
    for t in range(1, len(stream)):
        res = train_incremental_session(stream, t, state, snapshot_teacher(state, t - 1), cfg.incremental, out)
        state = res.state
        states.append(state)
        trace += _trace_rows(t, res)
        reports.append(session_report(stream, state, t, cfg.eval, previous=reports))
        if res.checkpoint_path is not None:
            artifacts.append(res.checkpoint_path)
    run = StreamRun(reports, states, trace, artifacts)
    if out is not None:
        artifacts.append(_write_text(out / "loss_trace.csv", _csv(trace, TRACE_COLUMNS)))
        artifacts.append(_write_text(out / "report.csv", reports_to_csv(reports)))
        for r in reports:
            artifacts.append(_write_text(out / f"confusion_session{r.session_id}.csv", confusion_to_csv(r)))
        artifacts.append(_write_text(out / "summary.csv", _csv([run.summary_row()], SUMMARY_COLUMNS)))
    return run


def run_stream(cfg: RunConfig, out_dir=None, stream: Optional[SessionStream] = None) -> StreamRun:
    """Base session, every incremental session, and a report per session."""
    return run_incremental(cfg, run_base(cfg, None, stream), out_dir)


def _touches_base(patch: dict) -> bool:
    return any(not (k.startswith("incremental.") or k.startswith("eval.")) for k in patch)


def run_points(cfg: RunConfig, points: Sequence[tuple[str, dict]], out_dir=None) -> dict[str, StreamRun]:
    """One stream run per (name, patch); the base session is shared when no patch changes it."""
    out = Path(out_dir) if out_dir is not None else None
    stream = build_stream(cfg)
    shared = None
    runs = {}
    for name, patch in points:
        pcfg = cfg.patched(patch)
        if _touches_base(patch):
            base = run_base(pcfg, None, build_stream(pcfg))
        else:
            shared = shared or run_base(cfg, None, stream)
            base = shared
        runs[name] = run_incremental(pcfg, base, None if out is None else out / name)
    if out is not None:
        rows = [run.summary_row(name) for name, run in runs.items()]
        _write_text(out / "summary.csv", _csv(rows, SUMMARY_COLUMNS))
    return runs


def sweep_points(cfg: RunConfig) -> list[tuple[str, dict]]:
    if cfg.sweep is None:
        raise InvalidConfig("sweep: config has no sweep section")
    param = cfg.sweep["param"]
    return [(f"{param.split('.')[-1]}_{v}", {param: v}) for v in cfg.sweep["values"]]


def ablation_points(cfg: RunConfig) -> list[tuple[str, dict]]:
    return [(name, ABLATIONS[name]) for name in cfg.ablation]


# --- manifests -----------------------------------------------------------------------


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    artifacts: dict
    git_describe: str
    started: str
    finished: str
    exit_status: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        known = {f.name for f in dataclasses.fields(cls)}
        missing = known - set(d)
        if missing:
            raise InvalidConfig(f"manifest is missing fields: {sorted(missing)}")
        return cls(**{k: d[k] for k in known})


MANIFEST_NAME = "manifest.json"


def write_manifest(out_dir, manifest: RunManifest) -> Path:
    return _write_text(Path(out_dir) / MANIFEST_NAME, manifest.to_json())


def read_manifest(path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        return RunManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"cannot read manifest {path}: {exc}") from None


def collect_artifacts(out_dir) -> dict[str, str]:
    """Relative path -> sha256 of every file under ``out_dir`` except the manifest."""
    root = Path(out_dir)
    return {
        p.relative_to(root).as_posix(): file_sha256(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != MANIFEST_NAME and not p.name.endswith(".tmp")
    }


def seeds_of(cfg: RunConfig) -> dict[str, Any]:
    return {
        "run": cfg.seed,
        "stream": cfg.stream.seed,
        "model": cfg.model.seed,
        "base": cfg.base.seed,
        "incremental": cfg.incremental.seed,
        "eval": cfg.eval.seed,
    }
