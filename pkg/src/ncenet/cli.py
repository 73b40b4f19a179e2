"""Command-line front end.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 gradient check failure.
Every command that takes ``--out`` finishes by writing ``manifest.json`` there;
``--manifest`` re-runs a recorded command with its recorded configuration.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import diffmath as dm
from . import pipeline as pl
from .evaluation import confusion_to_csv, reports_to_csv, session_report
from .exceptions import ConfigError, NCENetError
from .gradcheck import REGISTRY, check_all
from .model import load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3
COMMANDS = ("train-base", "run-stream", "evaluate", "gradcheck", "sweep", "ablate")

log = logging.getLogger("ncenet")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _json_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncenet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, help="JSON config (fields mirror the config dataclasses)")
        p.add_argument("--out", type=Path, required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="override every seed (beats CGCD_SEED and the file)")
        p.add_argument("--profile", choices=sorted(pl.PROFILES), help="default profile (desk unless the config says otherwise)")
        p.add_argument("--manifest", type=Path, help="replay the command recorded in this manifest")

    common(sub.add_parser("train-base", help="train the labelled base session"))
    common(sub.add_parser("run-stream", help="base session, every incremental session, per-session reports"))
    p = sub.add_parser("evaluate", help="re-evaluate the checkpoints of a previous run")
    common(p)
    p.add_argument("--checkpoints", type=Path, required=False, help="directory holding session<t>.ckpt files")
    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--out", type=Path, help="optional output directory for gradcheck.csv")
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--corrupt", metavar="PRIMITIVE", help="scale this primitive's adjoint (negative control)")
    p = sub.add_parser("sweep", help="one stream run per value of a config field")
    common(p)
    p.add_argument("--param", help="dotted field path, e.g. incremental.blend.lambda_b")
    p.add_argument("--values", help="comma-separated values (JSON-parsed)")
    p = sub.add_parser("ablate", help="one stream run per ablation variant")
    common(p)
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(pl.ABLATIONS)}")
    return parser


def _config(args) -> pl.RunConfig:
    if args.config is not None:
        return pl.load_config(args.config, args.profile, args.seed)
    return pl.resolve_config({}, args.profile, args.seed)


def _replay(args) -> tuple[pl.RunConfig, dict]:
    manifest = pl.read_manifest(args.manifest)
    if manifest.command != args.command:
        raise ConfigError(f"manifest records {manifest.command!r}, not {args.command!r}")
    snap = manifest.config
    cfg = pl.resolve_config({k: v for k, v in snap.items() if k != "extra"}, snap.get("profile"), snap.get("seed"), use_env=False)
    return cfg, snap.get("extra", {})


def _finish(args, cfg: Optional[pl.RunConfig], started: str, extra: dict, status: int) -> None:
    snap = cfg.to_dict() if cfg is not None else {}
    if extra:
        snap["extra"] = extra
    manifest = pl.RunManifest(
        command=args.command,
        config=snap,
        seeds=pl.seeds_of(cfg) if cfg is not None else {},
        artifacts=pl.collect_artifacts(args.out),
        git_describe=pl.git_describe(),
        started=started,
        finished=_now(),
        exit_status=status,
    )
    pl.write_manifest(args.out, manifest)


def _cmd_train_base(args, cfg, extra):
    run = pl.run_base(cfg, args.out)
    print(f"session 0: acc_all {run.report.acc_all:.4f}  checkpoint {run.result.checkpoint_path}")


def _print_summary(rows):
    print(",".join(pl.SUMMARY_COLUMNS))
    for row in rows:
        print(",".join(str(v) for v in row))


def _cmd_run_stream(args, cfg, extra):
    run = pl.run_stream(cfg, args.out)
    print(reports_to_csv(run.reports), end="")


def _cmd_evaluate(args, cfg, extra):
    ckpt_dir = Path(extra.get("checkpoints") or args.checkpoints or "")
    if not ckpt_dir.is_dir():
        raise ConfigError(f"--checkpoints: {ckpt_dir} is not a directory")
    extra["checkpoints"] = str(ckpt_dir)
    stream = pl.build_stream(cfg)
    reports = []
    for t in range(len(stream)):
        path = ckpt_dir / f"session{t}.ckpt"
        if not path.exists():
            break
        reports.append(session_report(stream, load_checkpoint(path), t, cfg.eval, previous=reports))
    if not reports:
        raise ConfigError(f"--checkpoints: no session0.ckpt in {ckpt_dir}")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.csv").write_text(reports_to_csv(reports), encoding="utf-8")
    for r in reports:
        (args.out / f"confusion_session{r.session_id}.csv").write_text(confusion_to_csv(r), encoding="utf-8")
    print(reports_to_csv(reports), end="")


def _cmd_sweep(args, cfg, extra):
    if args.param or extra.get("param"):
        param = extra.get("param") or args.param
        raw_values = extra.get("values")
        if raw_values is None:
            if not args.values:
                raise ConfigError("--values is required with --param")
            raw_values = [_json_value(v) for v in args.values.split(",")]
        extra.update(param=param, values=raw_values)
        cfg = pl.resolve_config({**cfg.to_dict(), "sweep": {"param": param, "values": raw_values}}, cfg.profile, cfg.seed, use_env=False)
    runs = pl.run_points(cfg, pl.sweep_points(cfg), args.out)
    _print_summary(run.summary_row(name) for name, run in runs.items())
    return cfg


def _cmd_ablate(args, cfg, extra):
    variants = extra.get("variants") or (args.variants.split(",") if args.variants else None)
    if variants:
        extra["variants"] = variants
        cfg = pl.resolve_config({**cfg.to_dict(), "ablation": variants}, cfg.profile, cfg.seed, use_env=False)
    runs = pl.run_points(cfg, pl.ablation_points(cfg), args.out)
    _print_summary(run.summary_row(name) for name, run in runs.items())
    return cfg


def _cmd_gradcheck(args) -> int:
    import contextlib

    ctx = dm.corrupted_adjoint(args.corrupt) if args.corrupt else contextlib.nullcontext()
    with ctx:
        worst = check_all(args.batches, args.epsilon, args.tolerance)
    failed = [name for name, err in worst.items() if not err < args.tolerance]
    lines = ["loss,max_rel_error,passed"] + [f"{n},{e:.3e},{n not in failed}" for n, e in worst.items()]
    print("\n".join(lines))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "gradcheck.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if len(worst) != len(REGISTRY):
        return EXIT_GRADCHECK
    return EXIT_GRADCHECK if failed else EXIT_OK


HANDLERS = {
    "train-base": _cmd_train_base,
    "run-stream": _cmd_run_stream,
    "evaluate": _cmd_evaluate,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "gradcheck":
        try:
            return _cmd_gradcheck(args)
        except KeyError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG

    started = _now()
    cfg = None
    try:
        if args.manifest is not None:
            cfg, extra = _replay(args)
        else:
            cfg, extra = _config(args), {}
        args.out.mkdir(parents=True, exist_ok=True)
        cfg = HANDLERS[args.command](args, cfg, extra) or cfg
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NCENetError, OSError, ArithmeticError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        _safe_finish(args, cfg, started, EXIT_RUNTIME)
        return EXIT_RUNTIME
    _finish(args, cfg, started, extra, EXIT_OK)
    return EXIT_OK


def _safe_finish(args, cfg, started, status):
    try:
        if args.out is not None and args.out.is_dir():
            _finish(args, cfg, started, {}, status)
    except Exception:  # the original error is what the caller needs to see
        log.exception("could not write manifest")


if __name__ == "__main__":
    sys.exit(main())
