"""Command-line experiment runner.

Every data file starts with a ``# config_hash=... seed=...`` line, followed
by a CSV header with a fixed column order.  Exit codes: 0 success, 1 config
error, 2 runtime error, 3 a scenario's own assertion failed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Sequence

from . import nn
from .cost import MODEL_PRESETS, NETWORK_PRESETS, EpochShape, network, profile_model
from .experiments import (EFFICIENCY_COLUMNS, directional_checks, efficiency_rows, optimizer_sweep,
                          score_summary)
from .optimizer import PipelineParams
from .orchestrator import ConfigError, TrainingConfig, resolve_params, run_fl_reference, run_training
from .sim import ScheduleMode, lane_intervals, simulate_iteration

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 1, 2, 3

DEFAULTS = {
    "training": {},
    "efficiency": {
        "models": ["vgg5-like", "resnet18-like"],
        "devices": 4,
        "dataset_size": 10000,
        "batch_size": 100,
        "device_speed": 1.0,
        "server_speed": 1.0,
        "jitter": 0.05,
        "contention": "processor-sharing",
    },
    "opt_score": {"seeds": 100, "min_frac_095": 0.90, "min_score": 0.90},
    "trace": {"model": "vgg5-like", "P": 1, "N": 3, "batch_size": 100},
}

SCORE_COLUMNS = ("seed", "model", "preset", "sel_P", "sel_N", "estimate_s", "oracle_P", "oracle_N",
                 "t_selected_s", "t_oracle_s", "score")
FIXED_P_COLUMNS = ("seed", "preset", "P", "rule_N", "best_N", "score")
EQUIVALENCE_COLUMNS = ("case", "epoch", "max_param_delta", "val_loss_delta", "tolerance")
TRACE_INTERVAL_COLUMNS = ("lane", "stage", "start", "end")
METRIC_COLUMNS = ("epoch", "mode", "devices", "epoch_s", "server_idle_s", "device_idle_s",
                  "throughput_mbps", "transmitted_mb")
LOSS_COLUMNS = ("epoch", "train_loss", "val_loss", "val_accuracy", "end_time_s")


class AcceptanceFailure(RuntimeError):
    pass


# -- config -----------------------------------------------------------------------

def load_config(path: str | None) -> dict:
    doc: dict = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in doc.items():
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be an object")
        if section != "training":
            unknown = set(values) - set(DEFAULTS[section])
            if unknown:
                raise ConfigError(f"section {section!r}: unknown keys {sorted(unknown)}")
        cfg[section].update(values)
    return cfg


def config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _presets(args) -> list[str]:
    return [args.preset] if args.preset else list(NETWORK_PRESETS)


def _training_config(cfg: dict, args) -> TrainingConfig:
    doc = dict(cfg["training"])
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.preset:
        doc["network"] = args.preset
    if args.mode:
        if args.mode not in ("pipelearn", "pipelearn-seq"):
            raise ConfigError(f"mode {args.mode!r} cannot drive split training")
        doc["mode"] = args.mode
    return TrainingConfig.from_dict(doc)


# -- output -------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def render_csv(columns: Sequence[str], rows: Iterable[dict], stamp: str) -> str:
    buf = io.StringIO()
    buf.write(f"# {stamp}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def _summary(out: Path, stamp: str, lines: list[str]) -> None:
    _write(out, "summary.txt", f"# {stamp}\n" + "\n".join(lines) + "\n")
    print("\n".join(lines))


def _checks(lines: list[str], checks: list[tuple[str, bool]]) -> None:
    for name, ok in checks:
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name}")
    failed = [name for name, ok in checks if not ok]
    if failed:
        raise AcceptanceFailure(f"{len(failed)} check(s) failed: {failed[0]}")


# -- scenarios ----------------------------------------------------------------------

def cmd_efficiency(cfg: dict, args, out: Path, stamp: str) -> None:
    e = cfg["efficiency"]
    for m in e["models"]:
        if m not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {m!r}; choose from {sorted(MODEL_PRESETS)}")
    try:
        shape = EpochShape(int(e["dataset_size"]), int(e["batch_size"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    seed = 0 if args.seed is None else args.seed
    modes = [args.mode] if args.mode else ["pipelearn", "sfl", "fl"]
    rows = []
    for m in e["models"]:
        prof = profile_model(m, float(e["device_speed"]), float(e["server_speed"]), seed,
                             batch_size=shape.batch_size, jitter=float(e["jitter"]))
        rows.extend(efficiency_rows(prof, _presets(args), modes, int(e["devices"]), shape, e["contention"]))
    _write(out, "efficiency.csv", render_csv(EFFICIENCY_COLUMNS, rows, stamp))
    lines = [f"{'model':<14} {'preset':<6} {'mode':<14} {'P':>3} {'N':>3} {'epoch_s':>10} "
             f"{'srv_idle_s':>10} {'dev_idle_s':>10} {'Mbps':>9}"]
    for r in rows:
        lines.append(f"{r['model']:<14} {r['preset']:<6} {r['mode']:<14} {r['P']!s:>3} {r['N']!s:>3} "
                     f"{r['epoch_s']:10.2f} {r['server_idle_s']:10.2f} {r['device_idle_s']:10.2f} "
                     f"{r['throughput_mbps']:9.2f}")
    checks = []
    for m in e["models"]:
        checks.extend(directional_checks([r for r in rows if r["model"] == m]))
    _checks_then_summary(out, stamp, lines, checks)


def _checks_then_summary(out: Path, stamp: str, lines: list[str], checks) -> None:
    try:
        _checks(lines, checks)
    finally:
        _summary(out, stamp, lines)


def cmd_opt_score(cfg: dict, args, out: Path, stamp: str) -> None:
    o = cfg["opt_score"]
    count = int(o["seeds"])
    if count < 1:
        raise ConfigError("opt_score.seeds must be >= 1")
    first = 0 if args.seed is None else args.seed
    rows, fixed = optimizer_sweep(range(first, first + count), _presets(args))
    _write(out, "opt_score.csv", render_csv(SCORE_COLUMNS, (r.as_row() for r in rows), stamp))
    _write(out, "opt_fixed_p.csv", render_csv(FIXED_P_COLUMNS, (f.as_row() for f in fixed), stamp))
    s = score_summary(rows)
    lines = [f"cases {s['cases']}  min {s['min']:.4f}  mean {s['mean']:.4f}  "
             f">=0.95 {s['frac_ge_095']:.1%}  >=0.90 {s['frac_ge_090']:.1%}"]
    checks = [
        ("scores in (0, 1]", all(0 < r.score <= 1 for r in rows)),
        ("oracle time <= selected time", all(r.t_oracle <= r.t_selected for r in rows)),
        (f">= {o['min_frac_095']:.0%} of cases score >= 0.95", s["frac_ge_095"] >= o["min_frac_095"]),
        (f"every case scores >= {o['min_score']}", s["min"] >= o["min_score"]),
    ]
    _checks_then_summary(out, stamp, lines, checks)


def _divisor_at_most(B: int, n: int) -> int:
    return max(d for d in range(1, min(B, n) + 1) if B % d == 0)


def equivalence_cases(tc: TrainingConfig) -> list[tuple[str, TrainingConfig, float | None]]:
    """``(name, config, tolerance)``; tolerance None means report only."""
    explicit = resolve_params(tc)
    divides = all(tc.batch_size % p.N == 0 for p in explicit)
    P0, N0 = explicit[0].P, explicit[0].N
    one_n = _divisor_at_most(tc.batch_size, max(N0, 2))
    return [
        ("configured", replace(tc, params=[[p.P, p.N] for p in explicit]), 1e-6 if divides else None),
        ("centralized", replace(tc, devices=1, params=[tc.Q, 1]), 0.0),
        ("one-iteration", replace(tc, epochs=1, samples_per_device=tc.batch_size, patience=None,
                                  params=[P0, one_n]), 1e-8),
    ]


def cmd_equivalence(cfg: dict, args, out: Path, stamp: str) -> None:
    tc = _training_config(cfg, args)
    rows, checks = [], []
    for name, case, tol in equivalence_cases(tc):
        pl, fl = run_training(case), run_fl_reference(case)
        worst = 0.0
        for e, (a, b, ta, tb) in enumerate(zip(pl.history, fl.history, pl.trace, fl.trace)):
            delta = nn.max_abs_diff(a, b)
            loss_delta = abs(ta.val_loss - tb.val_loss)
            worst = max(worst, delta, loss_delta)
            rows.append({"case": name, "epoch": e, "max_param_delta": float(delta),
                         "val_loss_delta": float(loss_delta), "tolerance": "" if tol is None else tol})
        if tol is not None:
            checks.append((f"{name}: max delta {worst:.3e} <= {tol:g}", worst <= tol))
    _write(out, "equivalence.csv", render_csv(EQUIVALENCE_COLUMNS, rows, stamp))
    lines = [f"{r['case']:<14} epoch {r['epoch']:>3}  param {r['max_param_delta']:.3e}  "
             f"loss {r['val_loss_delta']:.3e}" for r in rows]
    _checks_then_summary(out, stamp, lines, checks)


def cmd_trace(cfg: dict, args, out: Path, stamp: str) -> None:
    t = cfg["trace"]
    mode = ScheduleMode.parse(args.mode or "pipelearn")
    if mode is ScheduleMode.FEDERATED:
        raise ConfigError("the iteration trace needs a split mode")
    if t["model"] not in MODEL_PRESETS:
        raise ConfigError(f"unknown model preset {t['model']!r}")
    seed = 0 if args.seed is None else args.seed
    prof = profile_model(t["model"], seed=seed, batch_size=int(t["batch_size"]))
    try:
        p = PipelineParams(int(t["P"]), 1 if mode is ScheduleMode.CONVENTIONAL else int(t["N"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if p.P > prof.Q or p.N > prof.batch_size:
        raise ConfigError(f"P={p.P}, N={p.N} out of range for {t['model']}")
    net = network(args.preset or "4g")
    m = simulate_iteration(p.P, p.N, prof, net, record=True)
    spans = [{"lane": lane, "stage": task, "start": s, "end": e}
             for lane, task, s, e in lane_intervals(m.trace)]
    _write(out, "trace.csv", render_csv(TRACE_INTERVAL_COLUMNS, spans, stamp))
    lines = [f"{t['model']} {net.name} P={p.P} N={p.N}: makespan {m.epoch_makespan:.4f} s, "
             f"{len(spans)} intervals"]
    _summary(out, stamp, lines)


def cmd_train(cfg: dict, args, out: Path, stamp: str) -> None:
    tc = _training_config(cfg, args)
    res = run_training(tc)
    metrics = [{"epoch": e, **m.as_row()} for e, m in enumerate(res.metrics)]
    _write(out, "metrics.csv", render_csv(METRIC_COLUMNS, metrics, stamp))
    losses = [{"epoch": r.epoch, "train_loss": r.train_loss, "val_loss": r.val_loss,
               "val_accuracy": r.val_accuracy, "end_time_s": r.end_time} for r in res.trace]
    _write(out, "loss_trace.csv", render_csv(LOSS_COLUMNS, losses, stamp))
    doc = {"stamp": stamp, "params": [[p.P, p.N] for p in res.params], "model": nn.model_to_dict(res.model)}
    _write(out, "model.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")
    last = res.trace[-1]
    _summary(out, stamp, [f"{len(res.trace)} epochs, params {[(p.P, p.N) for p in res.params]}, "
                          f"val loss {last.val_loss:.6f}, accuracy {last.val_accuracy:.3f}"
                          + (", converged" if res.converged else "")])


COMMANDS = {
    "efficiency": cmd_efficiency,
    "opt-score": cmd_opt_score,
    "equivalence": cmd_equivalence,
    "trace": cmd_trace,
    "train": cmd_train,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="base seed recorded in every output")
    common.add_argument("--preset", choices=sorted(NETWORK_PRESETS), help="restrict to one network preset")
    common.add_argument("--mode", choices=[m.value for m in ScheduleMode], help="restrict to one training mode")
    parser = argparse.ArgumentParser(prog="pipelearn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("efficiency", parents=[common], help="epoch time, idle time and throughput per mode and preset")
    sub.add_parser("opt-score", parents=[common], help="score selected parameters against the exhaustive oracle")
    sub.add_parser("equivalence", parents=[common], help="compare pipelined training with federated averaging")
    sub.add_parser("trace", parents=[common], help="per-lane intervals of one training iteration")
    sub.add_parser("train", parents=[common], help="train and write metrics, loss trace and model")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        effective = {"command": args.command, "config": cfg, "seed": args.seed,
                     "preset": args.preset, "mode": args.mode}
        seed = args.seed
        if seed is None:
            seed = cfg["training"].get("seed", 0) if args.command in ("train", "equivalence") else 0
        stamp = f"config_hash={config_hash(effective)} seed={seed}"
        COMMANDS[args.command](cfg, args, Path(args.out), stamp)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AcceptanceFailure as exc:
        print(f"acceptance failure: {exc}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
