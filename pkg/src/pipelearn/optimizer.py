"""Choose the split point and parallel batch number for each device."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .cost import EpochShape, LayerProfiles, NetworkProfile, epoch_time


class DegenerateProfileError(ValueError):
    """Device-side compute time is zero, so the idle gap cannot be filled."""


@dataclass(frozen=True, order=True)
class PipelineParams:
    P: int
    N: int

    def __post_init__(self):
        if self.P < 1 or self.N < 1:
            raise ValueError(f"invalid pipeline parameters P={self.P}, N={self.N}")


def idle_gap(P: int, profiles: LayerProfiles, net: NetworkProfile) -> tuple[float, float]:
    """Device idle gap of an unpipelined iteration and the shorter device pass.

    Returns ``(upload + server fwd + server bwd + download, min(device fwd, device bwd))``,
    all for a full batch.
    """
    if not 1 <= P <= profiles.Q:
        raise ValueError(f"split point P={P} outside [1, {profiles.Q}]")
    fc, bc, fs, bs = profiles.split_sums(P)
    gap = (profiles.forward_volume[P - 1] / net.uplink + fs + bs
           + profiles.backward_volume[P - 1] / net.downlink)
    return float(gap), min(fc, bc)


def candidate_N(P: int, profiles: LayerProfiles, net: NetworkProfile, batch_size: int | None = None) -> int:
    """``1 + ceil(gap / min(device fwd, device bwd))``, clamped to ``[1, batch_size]``."""
    gap, fill = idle_gap(P, profiles, net)
    if fill <= 0:
        raise DegenerateProfileError(f"device-side time is zero at P={P}")
    N = 1 + math.ceil(gap / fill)
    if batch_size is not None:
        N = min(N, batch_size)
    return max(N, 1)


def shortlist(profiles: LayerProfiles, net: NetworkProfile, Q: int | None = None,
              batch_size: int | None = None) -> list[PipelineParams]:
    """One candidate per split point; split points without device compute are skipped."""
    Q = profiles.Q if Q is None else Q
    out: list[PipelineParams] = []
    for P in range(1, Q + 1):
        try:
            cand = PipelineParams(P, candidate_N(P, profiles, net, batch_size))
        except DegenerateProfileError:
            continue
        if cand not in out:
            out.append(cand)
    return out


@dataclass
class Selection:
    params: list[PipelineParams]
    estimates: list[float]
    # per device: every shortlisted candidate with its estimated epoch time
    candidates: list[list[tuple[PipelineParams, float]]] = field(default_factory=list)

    @property
    def global_estimate(self) -> float:
        return max(self.estimates)

    def report(self) -> str:
        lines = ["# pipeline parameter selection",
                 f"global_estimated_epoch_s = {self.global_estimate!r}"]
        for k, (p, est) in enumerate(zip(self.params, self.estimates)):
            lines.append(f"device {k}: P = {p.P}, N = {p.N}, estimated_epoch_s = {est!r}")
            for cand, t in self.candidates[k] if k < len(self.candidates) else ():
                mark = "*" if cand == p else " "
                lines.append(f"  {mark} P = {cand.P:3d}  N = {cand.N:4d}  estimate = {t!r}")
        return "\n".join(lines) + "\n"


def _select_one(profiles, net, shape, mode, devices):
    cands = shortlist(profiles, net, batch_size=shape.batch_size)
    if not cands:
        raise DegenerateProfileError("no split point has device-side compute")
    scored = []
    for c in cands:
        try:
            t = epoch_time(c.P, c.N, profiles, net, shape, mode=mode, devices=devices)
        except ValueError:
            continue  # dataset too small for this N
        scored.append((c, t))
    if not scored:
        raise ValueError("no shortlisted candidate fits the epoch shape")
    best = min(scored, key=lambda ct: (ct[1], ct[0].P, ct[0].N))
    return best[0], best[1], scored


def select_params(profiles, nets, shapes, mode: str = "parallel", devices: int | None = None) -> Selection:
    """Pick the shortlisted candidate with the lowest estimated epoch time.

    Accepts a single profile / network / shape or per-device sequences; each
    device is optimised independently.  Ties go to the smaller P, then N.
    ``mode="sequential"`` estimates with the server stages of all devices
    chained, ``devices`` defaulting to the number of profiles.
    """
    profs = list(profiles) if isinstance(profiles, (list, tuple)) else [profiles]
    K = len(profs)
    nets = list(nets) if isinstance(nets, (list, tuple)) else [nets] * K
    shapes = list(shapes) if isinstance(shapes, (list, tuple)) else [shapes] * K
    if not (len(nets) == len(shapes) == K):
        raise ValueError("profiles, networks and shapes must have one entry per device")
    if mode not in ("parallel", "sequential"):
        raise ValueError(f"unknown estimator mode {mode!r}")
    chained = (devices or K) if mode == "sequential" else 1
    sel = Selection([], [], [])
    for prof, net, shape in zip(profs, nets, shapes):
        p, t, scored = _select_one(prof, net, shape, mode, chained)
        sel.params.append(p)
        sel.estimates.append(t)
        sel.candidates.append(scored)
    return sel


def score(params, oracle_best, evaluator: Callable[[PipelineParams], float] | None = None) -> float:
    """``T(oracle) / T(selected)``; arguments may be times or params for ``evaluator``."""
    t_sel = evaluator(params) if isinstance(params, PipelineParams) else float(params)
    t_opt = evaluator(oracle_best) if isinstance(oracle_best, PipelineParams) else float(oracle_best)
    if not (t_sel > 0 and t_opt > 0) or not (math.isfinite(t_sel) and math.isfinite(t_opt)):
        raise ValueError("training times must be positive and finite")
    return t_opt / t_sel
