"""Experiment drivers shared by the command line and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .cost import NETWORK_PRESETS, EpochShape, LayerProfiles, NetworkProfile, network, profile_model
from .optimizer import PipelineParams, candidate_N, select_params
from .sim import RunMetrics, ScheduleMode, exhaustive_search, simulate

PRESETS = tuple(NETWORK_PRESETS)
FAMILY_MODELS = ("vgg5-like", "resnet18-like")
FAMILY_SHAPE = EpochShape(10000, 100)
FAMILY_SPEED_RANGE = (0.5, 2.0)
FAMILY_JITTER = 0.1


def family_profile(seed: int) -> LayerProfiles:
    """Optimizer-sweep profile number ``seed``.

    Models alternate by seed parity; device and server speed factors are
    log-uniform over ``FAMILY_SPEED_RANGE``.
    """
    rng = np.random.default_rng(seed)
    lo, hi = np.log(FAMILY_SPEED_RANGE[0]), np.log(FAMILY_SPEED_RANGE[1])
    d, s = np.exp(rng.uniform(lo, hi, 2))
    return profile_model(FAMILY_MODELS[seed % 2], float(d), float(s), seed, jitter=FAMILY_JITTER)


def directional_profiles(seeds: Iterable[int] = range(5)) -> list[LayerProfiles]:
    """Both model presets at nominal speed: weak devices, strong server."""
    return [profile_model(m, seed=s) for m in FAMILY_MODELS for s in seeds]


@dataclass(frozen=True)
class ScoreRow:
    seed: int
    model: str
    preset: str
    selected: PipelineParams
    estimate: float
    oracle: PipelineParams
    t_selected: float
    t_oracle: float

    @property
    def score(self) -> float:
        return self.t_oracle / self.t_selected

    def as_row(self) -> dict:
        return {
            "seed": self.seed, "model": self.model, "preset": self.preset,
            "sel_P": self.selected.P, "sel_N": self.selected.N, "estimate_s": self.estimate,
            "oracle_P": self.oracle.P, "oracle_N": self.oracle.N,
            "t_selected_s": self.t_selected, "t_oracle_s": self.t_oracle, "score": self.score,
        }


@dataclass(frozen=True)
class FixedPRow:
    seed: int
    preset: str
    P: int
    rule_N: int
    best_N: int
    score: float

    def as_row(self) -> dict:
        return {"seed": self.seed, "preset": self.preset, "P": self.P, "rule_N": self.rule_N,
                "best_N": self.best_N, "score": self.score}


def score_case(seed: int, profile: LayerProfiles, preset: str, shape: EpochShape = FAMILY_SHAPE):
    """Selected vs exhaustive-oracle parameters for one profile and network.

    Returns the :class:`ScoreRow` and one :class:`FixedPRow` per split point.
    """
    net = network(preset)
    sel = select_params(profile, net, shape)
    chosen, est = sel.params[0], sel.estimates[0]
    best, t_best, table = exhaustive_search(profile, net, shape)
    row = ScoreRow(seed, profile.name, preset, chosen, est, best, table[(chosen.P, chosen.N)], t_best)
    fixed = []
    for P in range(1, profile.Q + 1):
        at_P = {N: t for (p, N), t in table.items() if p == P}
        best_N = min(at_P, key=lambda N: (at_P[N], N))
        try:
            rule = candidate_N(P, profile, net, shape.batch_size)
        except ValueError:
            continue
        fixed.append(FixedPRow(seed, preset, P, rule, best_N, at_P[best_N] / at_P[rule]))
    return row, fixed


def optimizer_sweep(seeds: Iterable[int], presets: Sequence[str] = PRESETS,
                    shape: EpochShape = FAMILY_SHAPE) -> tuple[list[ScoreRow], list[FixedPRow]]:
    rows, fixed = [], []
    for seed in seeds:
        prof = family_profile(seed)
        for preset in presets:
            r, f = score_case(seed, prof, preset, shape)
            rows.append(r)
            fixed.extend(f)
    return rows, fixed


def score_summary(rows: Sequence[ScoreRow]) -> dict:
    s = np.array([r.score for r in rows])
    return {"cases": int(s.size), "min": float(s.min()), "mean": float(s.mean()),
            "frac_ge_095": float(np.mean(s >= 0.95)), "frac_ge_090": float(np.mean(s >= 0.90))}


# -- efficiency -------------------------------------------------------------------

def best_sfl(profile: LayerProfiles, net: NetworkProfile, shape: EpochShape, devices: int,
             **kw) -> tuple[PipelineParams, RunMetrics]:
    """Conventional split training at its best split point."""
    runs = [(PipelineParams(P, 1), simulate("sfl", PipelineParams(P, 1), profile, net, shape, devices, **kw))
            for P in range(1, profile.Q + 1)]
    return min(runs, key=lambda pr: (pr[1].epoch_makespan, pr[0].P))


def run_mode(mode: str, profile: LayerProfiles, net: NetworkProfile, shape: EpochShape, devices: int,
             contention: str = "processor-sharing", record: bool = False):
    """``(params or None, metrics)`` for one mode, choosing parameters as the mode would."""
    m = ScheduleMode.parse(mode)
    kw = {"record": record}
    if m is ScheduleMode.FEDERATED:
        return None, simulate(m, None, profile, net, shape, devices, **kw)
    if m is ScheduleMode.CONVENTIONAL:
        return best_sfl(profile, net, shape, devices, **kw)
    est_mode = "sequential" if m is ScheduleMode.PIPELEARN_SEQ else "parallel"
    p = select_params(profile, net, shape, mode=est_mode, devices=devices).params[0]
    return p, simulate(m, p, profile, net, shape, devices, contention=contention, **kw)


EFFICIENCY_COLUMNS = ("model", "preset", "mode", "P", "N", "epoch_s", "server_idle_s",
                      "device_idle_s", "throughput_mbps", "transmitted_mb")


def efficiency_rows(profile: LayerProfiles, presets: Sequence[str] = PRESETS,
                    modes: Sequence[str] = ("pipelearn", "sfl", "fl"), devices: int = 4,
                    shape: EpochShape = FAMILY_SHAPE, contention: str = "processor-sharing") -> list[dict]:
    rows = []
    for preset in presets:
        net = network(preset)
        for mode in modes:
            p, m = run_mode(mode, profile, net, shape, devices, contention)
            rows.append({
                "model": profile.name, "preset": preset, "mode": ScheduleMode.parse(mode).value,
                "P": "" if p is None else p.P, "N": "" if p is None else p.N,
                "epoch_s": float(m.epoch_makespan), "server_idle_s": float(m.server_idle),
                "device_idle_s": float(m.mean_device_idle), "throughput_mbps": float(m.avg_throughput),
                "transmitted_mb": float(m.transmitted_mb),
            })
    return rows


def directional_checks(rows: Sequence[dict]) -> list[tuple[str, bool]]:
    """The qualitative efficiency claims, one entry per (preset, claim)."""
    by = {(r["preset"], r["mode"]): r for r in rows}
    out = []
    for preset in dict.fromkeys(r["preset"] for r in rows):
        pl, sfl, fl = by.get((preset, "pipelearn")), by.get((preset, "sfl")), by.get((preset, "fl"))
        if pl is None or fl is None:
            continue
        tag = f"{pl['model']}/{preset}"
        if sfl is not None:
            out.append((f"{tag}: pipelearn < sfl < fl epoch time",
                        pl["epoch_s"] < sfl["epoch_s"] < fl["epoch_s"]))
        out.append((f"{tag}: server idle at least 2x below fl", bool(2 * pl["server_idle_s"] <= fl["server_idle_s"])))
        out.append((f"{tag}: throughput at least 10x fl", bool(pl["throughput_mbps"] >= 10 * fl["throughput_mbps"])))
        out.append((f"{tag}: selected P = 1", pl["P"] == 1))
    return out
