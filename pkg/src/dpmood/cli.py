"""Command-line entry point: generate, train, eval, sweep, analyze, gradcheck, recover.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import traceback
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

from . import analysis, datamodel
from .datamodel import atomic_write_text
from .modelzoo import VARIANTS, ModelSpec, gradient_suite, load_checkpoint, save_checkpoint
from .synthgen import GenConfig, generate_dataset, load_truth, recovery_report
from .trainer import SWEEP_FRACTIONS, TrainConfig, evaluate, ratio_sweep, results_text, sweep_to_csv, train

log = logging.getLogger("dpmood")

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    """Invalid flag, config entry or input; maps to exit code 1."""


# ---------------------------------------------------------------- config

def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; '#' starts a comment.  Keys are normalized to snake_case."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"--config {path}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"--config {path}:{n}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _coerce(name: str, value: Any, kind: type) -> Any:
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    try:
        if kind is bool:
            s = str(value).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError
        return kind(value)
    except (TypeError, ValueError):
        raise UsageError(f"{name}: cannot interpret {value!r} as {kind.__name__}") from None


@dataclass
class Param:
    name: str
    kind: type
    default: Any
    help: str = ""
    choices: tuple | None = None


def _resolve(params: list[Param], args: argparse.Namespace) -> dict[str, Any]:
    """Defaults < config file < command-line flags."""
    known = {p.name: p for p in params}
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    for key in cfg:
        if key not in known:
            raise UsageError(f"--config: unknown key '{key}'")
    out = {}
    for p in params:
        value = getattr(args, p.name, None)
        if value is None:
            value = cfg.get(p.name, p.default)
        if value is not None:
            value = _coerce(f"--{p.name.replace('_', '-')}", value, p.kind)
            if p.choices and value not in p.choices:
                raise UsageError(f"--{p.name.replace('_', '-')}: {value!r} is not one of {', '.join(map(str, p.choices))}")
        out[p.name] = value
    return out


def _add_params(parser: argparse.ArgumentParser, params: list[Param]) -> None:
    for p in params:
        flag = "--" + p.name.replace("_", "-")
        if p.kind is bool:
            parser.add_argument(flag, dest=p.name, nargs="?", const="true", default=None, help=p.help)
        else:
            parser.add_argument(flag, dest=p.name, default=None, help=p.help)


_TRAIN_PARAMS = [
    Param("variant", str, "dpMood-dropna", "model variant", tuple(VARIANTS)),
    Param("target", str, "hdrs", "regression target", ("hdrs", "ymrs")),
    Param("cohort", str, "all", "all subjects or bipolar only", ("all", "bipolar", "with-controls", "bipolar-only")),
    Param("seed", int, 0, "random seed"),
    Param("epochs", int, 200),
    Param("batch_size", int, 256),
    Param("learning_rate", float, 0.001),
    Param("dropout", float, 0.1),
    Param("min_seq", int, 10),
    Param("max_seq", int, 100),
    Param("gru_hidden", int, 20),
    Param("train_fraction", float, 0.8),
    Param("wall_time", bool, False, "record per-epoch wall time in metrics.csv"),
]

_GEN_PARAMS = [Param(f.name, type(f.default), f.default) for f in fields(GenConfig)
               if isinstance(f.default, (int, float)) and not isinstance(f.default, bool)]


def _train_config(p: dict) -> TrainConfig:
    cohort = {"all": "with-controls", "bipolar": "bipolar-only"}.get(p["cohort"], p["cohort"])
    try:
        return TrainConfig(learning_rate=p["learning_rate"], batch_size=p["batch_size"], epochs=p["epochs"],
                           dropout=p["dropout"], min_seq=p["min_seq"], max_seq=p["max_seq"],
                           gru_hidden=p["gru_hidden"], seed=p["seed"], train_fraction=p["train_fraction"],
                           target=p["target"], cohort=cohort)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _require_dir(flag: str, path) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{flag}: directory {p} does not exist")
    return p


def _require_file(flag: str, path) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: file {p} does not exist")
    return p


def _labeled(data_dir: Path, cfg: TrainConfig):
    try:
        ds = datamodel.load_dir(data_dir)
    except datamodel.SchemaError as exc:
        raise UsageError(str(exc)) from None
    except FileNotFoundError as exc:
        raise UsageError(f"--data-dir: {exc.filename} not found") from None
    ds = datamodel.filter_sessions(ds, cfg.min_seq, cfg.max_seq)
    sessions = datamodel.attach_labels(ds, target=cfg.target)
    return datamodel.select_cohort(sessions, cfg.cohort)


# ---------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    command: str
    config_path: str | None
    parameters: dict
    seed: int | None
    artifacts: dict[str, str] = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    status: str = "running"
    exit_code: int | None = None
    error: str | None = None

    def write(self, path) -> None:
        atomic_write_text(path, json.dumps(self.__dict__, indent=1, sort_keys=True, default=str) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------- commands

def cmd_generate(args, m: RunManifest) -> int:
    p = _resolve(_GEN_PARAMS, args)
    m.parameters, m.seed = p, p["seed"]
    out = args.out_dir
    if out is None:
        raise UsageError("--out-dir is required")
    try:
        cfg = GenConfig(**p)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    ds, truth = generate_dataset(cfg, out)
    for name in ("keypresses.csv", "accel.csv", "labels.csv", "truth.csv"):
        m.artifacts[name] = str(Path(out) / name)
    print(f"generated {len(ds.sessions)} sessions for {len(truth.subjects)} subjects in {out}")
    return 0


def cmd_train(args, m: RunManifest) -> int:
    p = _resolve(_TRAIN_PARAMS, args)
    m.parameters, m.seed = p, p["seed"]
    data_dir = _require_dir("--data-dir", args.data_dir)
    if args.out is None:
        raise UsageError("--out is required")
    cfg = _train_config(p)
    out = Path(args.out)
    sessions = _labeled(data_dir, cfg)
    train_set, test_set = datamodel.split_by_subject(sessions, cfg.train_fraction)
    if not train_set:
        raise UsageError(f"--data-dir: no labeled sessions survive filtering for cohort {p['cohort']}")
    spec = ModelSpec(p["variant"])
    model, hist = train(spec, train_set, test_set, cfg,
                        on_epoch=lambda r: log.info("epoch %d train %.4f test %.4f", r.epoch, r.train_rmse, r.test_rmse))
    final = evaluate(model, test_set) if test_set else math.nan
    save_checkpoint(model, out, extra={"train_config": cfg.to_dict()})
    metrics = out.parent / "metrics.csv"
    hist.write_csv(metrics, wall_time=p["wall_time"])
    results = out.parent / "results.json"
    atomic_write_text(results, results_text(spec.variant, cfg, final, hist))
    m.artifacts.update(checkpoint=str(out), metrics=str(metrics), results=str(results))
    print(f"{spec.variant}: {len(train_set)} train / {len(test_set)} test sessions, "
          f"{len(hist)} epochs, test RMSE {final:.4f}")
    return 0


def cmd_eval(args, m: RunManifest) -> int:
    model_path = _require_file("--model", args.model)
    data_dir = _require_dir("--data-dir", args.data_dir)
    model, extra = load_checkpoint(model_path)
    saved = extra.get("train_config", {})
    cfg = TrainConfig(**saved) if saved else TrainConfig()
    m.parameters = {"model": str(model_path), "data_dir": str(data_dir), "split": args.split}
    m.seed = cfg.seed
    sessions = _labeled(data_dir, cfg)
    train_set, test_set = datamodel.split_by_subject(sessions, cfg.train_fraction)
    chosen = {"test": test_set, "train": train_set, "all": sessions}[args.split]
    if not chosen:
        raise UsageError(f"--split {args.split}: no sessions to evaluate")
    value = evaluate(model, chosen)
    report = f"variant={model.spec.variant} split={args.split} sessions={len(chosen)} rmse={value!r}\n"
    if args.out:
        atomic_write_text(args.out, report)
        m.artifacts["report"] = args.out
    sys.stdout.write(report)
    return 0


def cmd_sweep(args, m: RunManifest) -> int:
    p = _resolve(_TRAIN_PARAMS, args)
    m.parameters, m.seed = p, p["seed"]
    data_dir = _require_dir("--data-dir", args.data_dir)
    try:
        fractions = [float(f) for f in args.fractions.split(",") if f.strip()]
    except ValueError:
        raise UsageError(f"--fractions: cannot parse {args.fractions!r}") from None
    if not fractions or not all(0 < f < 1 for f in fractions):
        raise UsageError("--fractions: every fraction must lie in (0, 1)")
    m.parameters["fractions"] = fractions
    cfg = _train_config(p)
    rows = ratio_sweep(ModelSpec(p["variant"]), _labeled(data_dir, cfg), fractions, cfg)
    text = sweep_to_csv(rows)
    out = args.out or "sweep.csv"
    atomic_write_text(out, text)
    m.artifacts["sweep"] = str(out)
    sys.stdout.write(text)
    return 0


def cmd_analyze(args, m: RunManifest) -> int:
    data_dir = _require_dir("--data-dir", args.data_dir)
    if args.out_dir is None:
        raise UsageError("--out-dir is required")
    if args.feature not in analysis.FEATURE_COLUMNS:
        raise UsageError(f"--feature: unknown feature {args.feature!r}; choose from "
                         f"{', '.join(analysis.FEATURE_COLUMNS)}")
    m.parameters = {"data_dir": str(data_dir), "feature": args.feature}
    try:
        ds = datamodel.load_dir(data_dir)
    except datamodel.SchemaError as exc:
        raise UsageError(str(exc)) from None
    m.artifacts.update(analysis.write_all(ds, args.feature, args.out_dir))
    print(f"wrote {', '.join(sorted(m.artifacts))} to {args.out_dir}")
    return 0


def cmd_gradcheck(args, m: RunManifest) -> int:
    variants = list(VARIANTS) if args.variant == "all" else [v.strip() for v in args.variant.split(",")]
    for v in variants:
        if v not in VARIANTS:
            raise UsageError(f"--variant: unknown variant {v!r}")
    seed = _coerce("--seed", args.seed if args.seed is not None else 0, int)
    m.parameters, m.seed = {"variant": variants, "eps": 1e-5, "tolerance": GRADCHECK_TOL}, seed
    ok = True
    lines = []
    for name, res in gradient_suite(variants, seed):
        passed = res.passed(GRADCHECK_TOL)
        ok &= passed
        lines.append(f"{name}: max_rel_err={res.max_rel_error:.3e} checked={res.checked} "
                     f"skipped={len(res.skipped)} {'PASS' if passed else 'FAIL'}")
    lines.append(f"overall: {'PASS' if ok else 'FAIL'} at tolerance {GRADCHECK_TOL:g}")
    print("\n".join(lines))
    if args.out:
        atomic_write_text(args.out, "\n".join(lines) + "\n")
        m.artifacts["report"] = args.out
    return 0 if ok else 2


def cmd_recover(args, m: RunManifest) -> int:
    model_path = _require_file("--model", args.model)
    truth_path = _require_file("--truth", args.truth)
    model, _ = load_checkpoint(model_path)
    if model.calibration.mode != "per-subject":
        raise UsageError(f"--model: variant {model.spec.variant} has no per-subject calibration")
    m.parameters = {"model": str(model_path), "truth": str(truth_path)}
    report = recovery_report(model.calibration, load_truth(truth_path))
    text = report.to_csv()
    if args.out:
        atomic_write_text(args.out, text)
        m.artifacts["report"] = args.out
    sys.stdout.write(text)
    print(f"sign(delta) agreement: {report.agreements}/{len(report.rows)}")
    for sid in report.missing_learned:
        print(f"missing from model: {sid}")
    for sid in report.missing_truth:
        print(f"missing from truth: {sid}")
    return 0


# ----------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one-line diagnostic instead of usage + exit
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpmood", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func: Callable, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=func)
        sp.add_argument("--manifest", help="where to write the run manifest (JSON)")
        return sp

    sp = add("generate", cmd_generate, "write a synthetic cohort (CSV files + truth.csv)")
    sp.add_argument("--config")
    sp.add_argument("--out-dir")
    _add_params(sp, _GEN_PARAMS)

    sp = add("train", cmd_train, "train one variant; writes checkpoint, metrics.csv, results.json")
    sp.add_argument("--config")
    sp.add_argument("--data-dir")
    sp.add_argument("--out")
    _add_params(sp, _TRAIN_PARAMS)

    sp = add("eval", cmd_eval, "RMSE of a checkpoint on a dataset split")
    sp.add_argument("--model")
    sp.add_argument("--data-dir")
    sp.add_argument("--split", choices=("test", "train", "all"), default="test")
    sp.add_argument("--out")

    sp = add("sweep", cmd_sweep, "train/test ratio sweep")
    sp.add_argument("--config")
    sp.add_argument("--data-dir")
    sp.add_argument("--fractions", default=",".join(str(f) for f in SWEEP_FRACTIONS))
    sp.add_argument("--out")
    _add_params(sp, _TRAIN_PARAMS)

    sp = add("analyze", cmd_analyze, "hourly/day-of-week stats, usage histogram, t-test grid")
    sp.add_argument("--data-dir")
    sp.add_argument("--feature", default="duration")
    sp.add_argument("--out-dir")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite")
    sp.add_argument("--variant", default="dpMood-dropna", help="variant, comma list, or 'all'")
    sp.add_argument("--seed")
    sp.add_argument("--out")

    sp = add("recover", cmd_recover, "compare learned calibration with planted truth")
    sp.add_argument("--model")
    sp.add_argument("--truth")
    sp.add_argument("--out")
    return parser


def _manifest_path(args) -> Path:
    if args.manifest:
        return Path(args.manifest)
    if getattr(args, "out_dir", None):
        return Path(args.out_dir) / "run_manifest.json"
    if getattr(args, "out", None):
        return Path(args.out).parent / "run_manifest.json"
    return Path("run_manifest.json")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(args.command, getattr(args, "config", None), {}, None, started=_now())
    try:
        code = args.func(args, manifest)
        manifest.status = "ok" if code == 0 else "failed"
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code, manifest.status, manifest.error = 1, "invalid", str(exc)
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("%s", traceback.format_exc())
        code, manifest.status, manifest.error = 2, "error", f"{type(exc).__name__}: {exc}"
    manifest.exit_code, manifest.finished = code, _now()
    try:
        manifest.write(_manifest_path(args))
    except OSError as exc:
        print(f"warning: could not write run manifest: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
