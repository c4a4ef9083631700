"""Stage dependency graph of one pipelined training iteration and its makespan.

An iteration on device ``k`` with ``N`` micro-batches has six stages per
micro-batch: device forward, upload, server forward, server backward,
download, device backward.  ``prev`` below encodes which stages must finish
before a stage may start.  The makespan estimator assumes every stage starts
the moment its predecessors are done (no resource contention).
"""

from __future__ import annotations

import csv
import graphlib
import io
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, Mapping, NamedTuple, Sequence


class StageKind(IntEnum):
    DEVICE_FORWARD = 0
    UPLOAD = 1
    SERVER_FORWARD = 2
    SERVER_BACKWARD = 3
    DOWNLOAD = 4
    DEVICE_BACKWARD = 5

    @property
    def symbol(self) -> str:
        return _SYMBOLS[self]

    @property
    def lane(self) -> str:
        return _LANES[self]


_SYMBOLS = {
    StageKind.DEVICE_FORWARD: "fc",
    StageKind.UPLOAD: "u",
    StageKind.SERVER_FORWARD: "fs",
    StageKind.SERVER_BACKWARD: "bs",
    StageKind.DOWNLOAD: "d",
    StageKind.DEVICE_BACKWARD: "bc",
}
_LANES = {
    StageKind.DEVICE_FORWARD: "device",
    StageKind.DEVICE_BACKWARD: "device",
    StageKind.UPLOAD: "uplink",
    StageKind.DOWNLOAD: "downlink",
    StageKind.SERVER_FORWARD: "server",
    StageKind.SERVER_BACKWARD: "server",
}

FC, U, FS, BS, D, BC = StageKind


class Stage(NamedTuple):
    kind: StageKind
    n: int
    k: int = 0

    def __str__(self) -> str:
        return f"{self.kind.symbol}{self.k}_{self.n}"

    @property
    def lane(self) -> str:
        """Resource lane name, e.g. ``device0`` or ``server``."""
        base = self.kind.lane
        return base if base == "server" else f"{base}{self.k}"


def stage_prev(kind: StageKind, n: int, N: int, k: int = 0) -> tuple[Stage, ...]:
    """Predecessors of stage ``(kind, n)`` in an iteration of ``N`` micro-batches."""
    if not 1 <= n <= N:
        raise ValueError(f"micro-batch index {n} outside [1, {N}]")
    s = lambda kd, i: Stage(kd, i, k)  # noqa: E731
    if kind is FC:
        return (s(FC, n - 1),) if n > 1 else ()
    if kind is U:
        return (s(U, n - 1), s(FC, n)) if n > 1 else (s(FC, n),)
    if kind is FS:
        return (s(U, n), s(BS, n - 1)) if n > 1 else (s(U, n),)
    if kind is BS:
        return (s(FS, n),)
    if kind is D:
        return (s(D, n - 1), s(BS, n)) if n > 1 else (s(BS, n),)
    if kind is BC:
        return (s(BC, n - 1), s(D, n)) if n > 1 else (s(FC, N), s(D, 1))
    raise ValueError(kind)


@dataclass(frozen=True)
class StageGraph:
    """Immutable DAG; ``order`` is a topological order of ``prev``'s keys."""

    prev: Mapping[Stage, tuple[Stage, ...]]
    order: tuple[Stage, ...] = field(init=False)
    N: int | None = None

    def __post_init__(self):
        for r, ps in self.prev.items():
            for p in ps:
                if p not in self.prev:
                    raise ValueError(f"{r} depends on unknown stage {p}")
        sorter = graphlib.TopologicalSorter()
        for r in sorted(self.prev):
            sorter.add(r, *self.prev[r])
        try:
            order = tuple(sorter.static_order())
        except graphlib.CycleError as exc:
            raise ValueError(f"stage graph has a cycle: {exc.args[1]}") from None
        object.__setattr__(self, "order", order)

    @property
    def stages(self) -> tuple[Stage, ...]:
        return self.order

    def __len__(self) -> int:
        return len(self.prev)

    def __contains__(self, stage) -> bool:
        return stage in self.prev

    def edges(self) -> list[tuple[Stage, Stage]]:
        return [(p, r) for r in self.order for p in self.prev[r]]

    def successors(self) -> Dict[Stage, list[Stage]]:
        nxt: Dict[Stage, list[Stage]] = {r: [] for r in self.order}
        for p, r in self.edges():
            nxt[p].append(r)
        return nxt

    @property
    def sources(self) -> list[Stage]:
        return [r for r in self.order if not self.prev[r]]

    @property
    def sinks(self) -> list[Stage]:
        nxt = self.successors()
        return [r for r in self.order if not nxt[r]]


def build_iteration_graph(N: int, k: int = 0) -> StageGraph:
    if N < 1:
        raise ValueError("parallel batch number N must be >= 1")
    prev = {
        Stage(kind, n, k): stage_prev(kind, n, N, k)
        for n in range(1, N + 1)
        for kind in StageKind
    }
    return StageGraph(prev, N=N)


def compose(graphs: Iterable[StageGraph], extra_edges: Sequence[tuple[Stage, Stage]] = ()) -> StageGraph:
    """Union of disjoint graphs plus ``(before, after)`` edges."""
    prev: Dict[Stage, tuple[Stage, ...]] = {}
    for g in graphs:
        overlap = prev.keys() & g.prev.keys()
        if overlap:
            raise ValueError(f"graphs share stages: {sorted(overlap)[:3]}")
        prev.update(g.prev)
    for before, after in extra_edges:
        prev[after] = prev[after] + (before,)
    return StageGraph(prev)


def kind_times(P: int, N: int, profile, net, fraction: float | None = None) -> Dict[StageKind, float]:
    """Duration of each stage kind; every micro-batch costs ``fraction`` of a full batch.

    ``fraction`` defaults to ``1 / N``.  Layer times are per full batch in
    seconds, volumes in megabits, bandwidths in Mbps.
    """
    Q = profile.Q
    if not 1 <= P <= Q:
        raise ValueError(f"split point P={P} outside [1, {Q}]")
    if N < 1:
        raise ValueError("N must be >= 1")
    if net.uplink <= 0 or net.downlink <= 0:
        raise ValueError("bandwidths must be positive")
    frac = 1.0 / N if fraction is None else fraction
    fc, bc, fs, bs = profile.split_sums(P)
    return {
        FC: fc * frac,
        U: profile.forward_volume[P - 1] * frac / net.uplink,
        FS: fs * frac,
        BS: bs * frac,
        D: profile.backward_volume[P - 1] * frac / net.downlink,
        BC: bc * frac,
    }


def stage_times(P: int, N: int, profile, net, k: int = 0, fraction: float | None = None) -> Dict[Stage, float]:
    """Per-stage durations of one iteration, see :func:`kind_times`."""
    per_kind = kind_times(P, N, profile, net, fraction)
    return {Stage(kind, n, k): per_kind[kind] for n in range(1, N + 1) for kind in StageKind}


class MissingStageTime(KeyError):
    pass


def completion_times(graph: StageGraph, times: Mapping[Stage, float]) -> Dict[Stage, float]:
    """``T(r) = t(r) + max(T(p) for p in prev(r))`` over a topological order."""
    T: Dict[Stage, float] = {}
    for r in graph.order:
        try:
            t = times[r]
        except KeyError:
            raise MissingStageTime(f"no duration for stage {r}") from None
        if t < 0:
            raise ValueError(f"negative duration for stage {r}")
        ps = graph.prev[r]
        T[r] = t + (max(T[p] for p in ps) if ps else 0.0)
    return T


def estimate_makespan(graph: StageGraph, times: Mapping[Stage, float]) -> float:
    """Completion time of the last stage (the latest sink for composed graphs)."""
    T = completion_times(graph, times)
    return max(T[r] for r in graph.sinks)


@dataclass(frozen=True)
class ScheduleRow:
    stage: Stage
    lane: str
    start: float
    end: float


def schedule(graph: StageGraph, times: Mapping[Stage, float]) -> list[ScheduleRow]:
    """Earliest-start schedule implied by the estimator, ordered by (start, lane, stage)."""
    T = completion_times(graph, times)
    rows = [ScheduleRow(r, r.lane, T[r] - times[r], T[r]) for r in graph.order]
    rows.sort(key=lambda row: (row.start, row.lane, row.stage))
    return rows


SCHEDULE_COLUMNS = ("lane", "stage", "kind", "device", "batch", "start", "end")


def schedule_csv(rows: Iterable[ScheduleRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCHEDULE_COLUMNS)
    for row in rows:
        s = row.stage
        w.writerow([row.lane, str(s), s.kind.symbol, s.k, s.n, repr(row.start), repr(row.end)])
    return buf.getvalue()
