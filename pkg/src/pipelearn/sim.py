"""Discrete-event simulation of devices, a server and their links.

Every piece of work is a task on a lane.  Lane policies:

``exclusive``
    one task at a time; ready tasks start in order of readiness, ties broken
    by (iteration, device, micro-batch, stage kind).
``shared``
    processor sharing: with ``m`` resident tasks each progresses at rate ``1/m``.
``unbounded``
    every ready task starts at once (the estimator's assumption).

Lanes are ``device{k}``, ``uplink{k}``, ``downlink{k}`` and ``server``.  A
simulated epoch ends with the device models going up, one FedAvg on the
server and the global model coming back down.
"""

from __future__ import annotations

import csv
import heapq
import io
import math
from functools import lru_cache
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import _kernel
from .cost import EpochShape, LayerProfiles, NetworkProfile
from .optimizer import PipelineParams
from .stages import StageKind, build_iteration_graph, kind_times

EXCLUSIVE = "exclusive"
SHARED = "shared"
UNBOUNDED = "unbounded"

# seconds of server compute per million parameters per aggregated model
AGG_SECONDS_PER_MPARAM = 0.01

_PS_EPS = 1e-12


class ScheduleMode(str, Enum):
    PIPELEARN = "pipelearn"  # server-side models trained in parallel
    PIPELEARN_SEQ = "pipelearn-seq"  # server-side models trained one device after another
    CONVENTIONAL = "sfl"  # split training without reordering, one shared server model
    FEDERATED = "fl"

    @classmethod
    def parse(cls, value) -> "ScheduleMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown mode {value!r}; choose from {[m.value for m in cls]}") from None


@dataclass
class Task:
    name: str
    lane: str
    work: float
    priority: tuple
    prev: list = field(default_factory=list)
    megabits: float = 0.0


@dataclass(frozen=True)
class TraceEvent:
    time: float
    lane: str
    task: str
    event: str  # "start" | "finish"


@dataclass
class SimResult:
    start: list
    finish: list
    lane_busy: dict
    makespan: float
    trace: list


class DeadlockError(RuntimeError):
    pass


@dataclass
class _Plan:
    """Task DAG flattened to integer arrays for the event loop."""

    names: list
    lane_names: list
    lane: list  # lane index per task
    rank: list  # position of the task in priority order
    succ: list
    npred: list
    _arrays: tuple | None = field(default=None, repr=False)

    def arrays(self) -> tuple:
        """``(lane, rank, succ_ptr, succ_idx, npred)`` as int64 arrays for the compiled loop."""
        if self._arrays is None:
            ptr = np.zeros(len(self.succ) + 1, dtype=np.int64)
            ptr[1:] = np.cumsum([len(s) for s in self.succ])
            idx = np.fromiter((j for s in self.succ for j in s), dtype=np.int64, count=int(ptr[-1]))
            self._arrays = (np.asarray(self.lane, dtype=np.int64), np.asarray(self.rank, dtype=np.int64),
                            ptr, idx, np.asarray(self.npred, dtype=np.int64))
        return self._arrays


def _plan(tasks: Sequence[Task]) -> _Plan:
    n = len(tasks)
    lane_names = sorted({t.lane for t in tasks})
    index = {ln: i for i, ln in enumerate(lane_names)}
    succ: list[list[int]] = [[] for _ in range(n)]
    for i, t in enumerate(tasks):
        for p in t.prev:
            succ[p].append(i)
    order = sorted(range(n), key=lambda i: (tasks[i].priority, i))
    rank = [0] * n
    for r, i in enumerate(order):
        rank[i] = r
    return _Plan([t.name for t in tasks], lane_names, [index[t.lane] for t in tasks],
                 rank, succ, [len(t.prev) for t in tasks])


def run_tasks(tasks: Sequence[Task], policies: dict | None = None, default: str = EXCLUSIVE,
              record: bool = True, engine: str = "auto") -> SimResult:
    """Event-driven execution of a task DAG on policy-governed lanes.

    ``engine="auto"`` uses the compiled loop when no trace is recorded and no
    lane is shared; ``"python"`` forces the reference loop.
    """
    plan = _plan(tasks)
    policies = policies or {}
    pol = [policies.get(ln, default) for ln in plan.lane_names]
    return _execute(plan, [t.work for t in tasks], pol, record, engine)


def _execute(plan: _Plan, work, pol: list, record: bool, engine: str = "auto") -> SimResult:
    if engine not in ("auto", "python", "compiled"):
        raise ValueError(f"unknown engine {engine!r}")
    for p in pol:
        if p not in (EXCLUSIVE, SHARED, UNBOUNDED):
            raise ValueError(f"unknown lane policy {p!r}")
    fast = not record and SHARED not in pol
    if engine == "compiled" and not fast:
        raise ValueError("the compiled loop supports neither traces nor shared lanes")
    if engine == "python" or not fast:
        return _execute_python(plan, list(work), pol, record)
    lane, rank, ptr, idx, npred = plan.arrays()
    start, finish, busy, done = _kernel.execute(
        lane, rank, ptr, idx, npred, np.asarray(work, dtype=np.float64),
        np.array([p == EXCLUSIVE for p in pol], dtype=np.bool_))
    n = len(work)
    if done != n:
        raise DeadlockError(f"{n - done} tasks never became ready")
    makespan = float(finish.max()) if n else 0.0
    return SimResult(start.tolist(), finish.tolist(), dict(zip(plan.lane_names, busy.tolist())), makespan, [])


def _execute_python(plan: _Plan, work: list, pol: list, record: bool) -> SimResult:
    n = len(work)
    lane, rank, succ = plan.lane, plan.rank, plan.succ
    npred = list(plan.npred)
    L = len(plan.lane_names)
    exclusive = [p == EXCLUSIVE for p in pol]
    shared = [p == SHARED for p in pol]
    start = [math.nan] * n
    finish = [math.nan] * n
    ready: list[list] = [[] for _ in range(L)]
    occupied = [False] * L
    active = [0] * L
    busy_since = [0.0] * L
    busy = [0.0] * L
    ps_tasks: list[dict] = [{} for _ in range(L)]
    ps_last = [0.0] * L
    ps_version = [0] * L
    events: list = []
    trace: list[TraceEvent] = []
    push, pop = heapq.heappush, heapq.heappop
    now = 0.0
    done = 0

    def ps_advance(ln):
        act = ps_tasks[ln]
        if act:
            dt = (now - ps_last[ln]) / len(act)
            for tid in act:
                act[tid] -= dt
        ps_last[ln] = now

    def ps_reschedule(ln):
        ps_version[ln] += 1
        act = ps_tasks[ln]
        if act:
            t_next = now + max(min(act.values()), 0.0) * len(act)
            push(events, (t_next, -1, -1 - ln, ps_version[ln]))

    def begin(tid):
        ln = lane[tid]
        start[tid] = now
        if active[ln] == 0:
            busy_since[ln] = now
        active[ln] += 1
        if record:
            trace.append(TraceEvent(now, plan.lane_names[ln], plan.names[tid], "start"))
        if shared[ln]:
            ps_advance(ln)
            ps_tasks[ln][tid] = work[tid]
            ps_reschedule(ln)
        else:
            push(events, (now + work[tid], rank[tid], tid, 0))

    newly = [i for i in range(n) if npred[i] == 0]
    touched: set[int] = set()

    def complete(tid):
        nonlocal done
        ln = lane[tid]
        finish[tid] = now
        done += 1
        active[ln] -= 1
        if active[ln] == 0:
            busy[ln] += now - busy_since[ln]
        if record:
            trace.append(TraceEvent(now, plan.lane_names[ln], plan.names[tid], "finish"))
        for s in succ[tid]:
            npred[s] -= 1
            if npred[s] == 0:
                newly.append(s)

    while True:
        if len(newly) > 1:
            newly.sort(key=rank.__getitem__)
        for tid in newly:
            ln = lane[tid]
            if exclusive[ln]:
                if occupied[ln] or ready[ln] or record:
                    push(ready[ln], (now, rank[tid], tid))
                    touched.add(ln)
                else:
                    # idle lane, empty queue: this is the highest-ranked arrival
                    occupied[ln] = True
                    start[tid] = now
                    if active[ln] == 0:
                        busy_since[ln] = now
                    active[ln] += 1
                    push(events, (now + work[tid], rank[tid], tid, 0))
            elif shared[ln] or record:
                begin(tid)
            else:
                start[tid] = now
                if active[ln] == 0:
                    busy_since[ln] = now
                active[ln] += 1
                push(events, (now + work[tid], rank[tid], tid, 0))
        newly.clear()
        if touched:
            for ln in (sorted(touched) if len(touched) > 1 else touched):
                if ready[ln] and not occupied[ln]:
                    occupied[ln] = True
                    tid = pop(ready[ln])[2]
                    if record:
                        begin(tid)
                    else:
                        start[tid] = now
                        if active[ln] == 0:
                            busy_since[ln] = now
                        active[ln] += 1
                        push(events, (now + work[tid], rank[tid], tid, 0))
            touched.clear()
        if not events:
            break
        now = events[0][0]
        while events and events[0][0] == now:
            _, _, code, version = pop(events)
            if code >= 0:
                ln = lane[code]
                if exclusive[ln]:
                    occupied[ln] = False
                    if ready[ln]:
                        touched.add(ln)
                if record:
                    complete(code)
                    continue
                finish[code] = now
                done += 1
                active[ln] -= 1
                if active[ln] == 0:
                    busy[ln] += now - busy_since[ln]
                for s in succ[code]:
                    npred[s] -= 1
                    if npred[s] == 0:
                        newly.append(s)
                continue
            ln = -1 - code
            if version != ps_version[ln]:
                continue
            ps_advance(ln)
            act = ps_tasks[ln]
            floor = min(act.values()) + _PS_EPS
            for tid in sorted((t for t, r in act.items() if r <= floor), key=rank.__getitem__):
                del act[tid]
                complete(tid)
            ps_reschedule(ln)
    if done != n:
        raise DeadlockError(f"{n - done} tasks never became ready")
    makespan = max(finish) if n else 0.0
    return SimResult(start, finish, dict(zip(plan.lane_names, busy)), makespan, trace)


# -- metrics -------------------------------------------------------------------

@dataclass
class RunMetrics:
    mode: str
    devices: int
    epoch_makespan: float
    lane_busy: dict
    transmitted_mb: float
    trace: list = field(default_factory=list, repr=False)

    def lane_idle(self, lane: str) -> float:
        return self.epoch_makespan - self.lane_busy.get(lane, 0.0)

    @property
    def server_idle(self) -> float:
        return self.lane_idle("server")

    @property
    def device_idle(self) -> list[float]:
        return [self.lane_idle(f"device{k}") for k in range(self.devices)]

    @property
    def mean_device_idle(self) -> float:
        idle = self.device_idle
        return sum(idle) / len(idle)

    @property
    def avg_throughput(self) -> float:
        """Megabits moved over all links per second of the epoch."""
        return self.transmitted_mb / self.epoch_makespan if self.epoch_makespan > 0 else 0.0

    def as_row(self) -> dict:
        return {
            "mode": self.mode,
            "devices": self.devices,
            "epoch_s": self.epoch_makespan,
            "server_idle_s": self.server_idle,
            "device_idle_s": self.mean_device_idle,
            "throughput_mbps": self.avg_throughput,
            "transmitted_mb": self.transmitted_mb,
        }


TRACE_COLUMNS = ("time", "lane", "task", "event")


def trace_csv(trace: Iterable[TraceEvent]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for ev in trace:
        w.writerow([repr(ev.time), ev.lane, ev.task, ev.event])
    return buf.getvalue()


def lane_intervals(trace: Iterable[TraceEvent]) -> list[tuple[str, str, float, float]]:
    """Pair start/finish events into ``(lane, task, start, end)`` rows."""
    open_at: dict[tuple[str, str], float] = {}
    rows = []
    for ev in trace:
        key = (ev.lane, ev.task)
        if ev.event == "start":
            open_at[key] = ev.time
        else:
            rows.append((ev.lane, ev.task, open_at.pop(key), ev.time))
    rows.sort(key=lambda r: (r[2], r[0], r[1]))
    return rows


# -- task graph construction ------------------------------------------------------

def _broadcast(value, K: int, what: str) -> list:
    if isinstance(value, (list, tuple)):
        if len(value) != K:
            raise ValueError(f"need one {what} per device ({K}), got {len(value)}")
        return list(value)
    return [value] * K


def aggregation_time(params: float, models: int, cost: float = AGG_SECONDS_PER_MPARAM) -> float:
    return cost * models * params / 1e6


class _Builder:
    def __init__(self):
        self.tasks: list[Task] = []

    def add(self, name, lane, work, priority, prev=(), megabits=0.0) -> int:
        self.tasks.append(Task(name, lane, float(work), priority, list(prev), megabits))
        return len(self.tasks) - 1


def _micro_fraction(N: int, B: int, time_model: str) -> float:
    if time_model == "even":
        return 1.0 / N
    if time_model == "rows":
        return (B // N) / B
    raise ValueError(f"unknown time model {time_model!r}")


def stage_work(P: int, N: int, prof: LayerProfiles, net: NetworkProfile, frac: float) -> dict:
    """Simulated duration of each stage kind.

    Transfers cost ``frac`` of the full-batch volume; compute stages also pay
    the profile's per-call overhead of ``call_overhead_rows`` rows.
    """
    if not prof.call_overhead_rows:
        return kind_times(P, N, prof, net, frac)
    work = kind_times(P, N, prof, net, frac)
    compute = kind_times(P, N, prof, net, frac + prof.call_overhead_rows / prof.batch_size)
    for kind in (StageKind.DEVICE_FORWARD, StageKind.DEVICE_BACKWARD,
                 StageKind.SERVER_FORWARD, StageKind.SERVER_BACKWARD):
        work[kind] = compute[kind]
    return work


@lru_cache(maxsize=256)
def _iteration_order(N: int) -> tuple:
    """Stages of one iteration in topological order as ``(kind, n, prev keys)``."""
    g = build_iteration_graph(N)
    return tuple((r.kind, r.n, tuple((p.kind, p.n) for p in g.prev[r])) for r in g.order)


_UNIT_PROFILE = LayerProfiles([1.0], [1.0], [1.0], [1.0], [1.0], [1.0])
_UNIT_NET = NetworkProfile(1.0, 1.0)


def _split_iterations(b: _Builder, k, P, N, prof, net, frac, iterations, first_prev=()):
    """Append ``iterations`` pipelined iterations for device ``k``; each
    micro-batch costs ``frac`` of a full batch.

    Returns (last task id, server blocks as (iteration, first fs id, last bs id)).
    """
    per_kind = stage_work(P, N, prof, net, frac)
    vol = {StageKind.UPLOAD: prof.forward_volume[P - 1] * frac,
           StageKind.DOWNLOAD: prof.backward_volume[P - 1] * frac}
    order = _iteration_order(N)
    last = list(first_prev)
    blocks = []
    for i in range(iterations):
        ids = {}
        for kind, n, prev_keys in order:
            prev = [ids[key] for key in prev_keys] if prev_keys else list(last)
            lane = f"{kind.lane}{k}" if kind.lane != "server" else "server"
            ids[(kind, n)] = b.add(
                f"{kind.symbol}{k}_{n}@{i}", lane, per_kind[kind], (i, k, n, int(kind)),
                prev, vol.get(kind, 0.0))
        last = [ids[(StageKind.DEVICE_BACKWARD, N)]]
        blocks.append((i, ids[(StageKind.SERVER_FORWARD, 1)], ids[(StageKind.SERVER_BACKWARD, N)]))
    return last, blocks


def _aggregation(b: _Builder, ends, ups_mb, downs_mb, nets, agg_work, big):
    """Model upload per device, FedAvg on the server, model download per device."""
    K = len(ends)
    ups = [b.add(f"model_up{k}", f"uplink{k}", ups_mb[k] / nets[k].uplink, (big, k, 0, 0),
                 ends[k], ups_mb[k]) for k in range(K)]
    agg = b.add("fedavg", "server", agg_work, (big, K, 0, 0), ups)
    for k in range(K):
        b.add(f"model_down{k}", f"downlink{k}", downs_mb[k] / nets[k].downlink, (big + 1, k, 0, 0),
              [agg], downs_mb[k])


def build_epoch_tasks(mode, params, profiles, nets, shapes, devices: int | None = None,
                      time_model: str = "rows", agg_cost: float = AGG_SECONDS_PER_MPARAM,
                      epochs_per_round: int = 1) -> list[Task]:
    mode = ScheduleMode.parse(mode)
    K = devices or next((len(x) for x in (params, profiles, nets, shapes) if isinstance(x, (list, tuple))), 1)
    profs = _broadcast(profiles, K, "profile")
    nets = _broadcast(nets, K, "network")
    shapes = _broadcast(shapes, K, "epoch shape")
    b = _Builder()
    if mode is ScheduleMode.FEDERATED:
        ends = []
        for k in range(K):
            pk = profs[k]
            work = float(pk.device_forward.sum() + pk.device_backward.sum()) * (
                1.0 + pk.call_overhead_rows / pk.batch_size)
            last = []
            for i in range(shapes[k].iterations(1) * epochs_per_round):
                last = [b.add(f"local{k}@{i}", f"device{k}", work, (i, k, 0, 0), last)]
            ends.append(last)
        sizes = [profs[k].model_megabits() for k in range(K)]
        agg = aggregation_time(float(sum(p.params.sum() for p in profs)) / K, K, agg_cost)
        _aggregation(b, ends, sizes, sizes, nets, agg, 1 << 40)
        return b.tasks

    plist = _broadcast(params, K, "parameter pair")
    if mode is ScheduleMode.CONVENTIONAL:
        plist = [PipelineParams(p.P, 1) for p in plist]
    ends, blocks = [], []
    for k in range(K):
        P, N = plist[k].P, plist[k].N
        frac = _micro_fraction(N, shapes[k].batch_size, time_model)
        last, blk = _split_iterations(b, k, P, N, profs[k], nets[k], frac,
                                      shapes[k].iterations(N))
        ends.append(last)
        blocks.extend((i, k, first, lastbs) for i, first, lastbs in blk)
    if mode is ScheduleMode.PIPELEARN_SEQ:
        blocks.sort()
        for (_, _, _, before), (_, _, after, _) in zip(blocks, blocks[1:]):
            b.tasks[after].prev.append(before)
    dev_mb = [profs[k].model_megabits(0, plist[k].P) for k in range(K)]
    if mode is ScheduleMode.CONVENTIONAL:
        agg_params = sum(float(profs[k].params[:plist[k].P].sum()) for k in range(K)) / K
    else:
        agg_params = sum(float(p.params.sum()) for p in profs) / K
    _aggregation(b, ends, dev_mb, dev_mb, nets, aggregation_time(agg_params, K, agg_cost), 1 << 40)
    return b.tasks


def lane_policies(mode, tasks: Sequence[Task], contention: str = "processor-sharing",
                  lanes: str = "exclusive") -> dict:
    """Lane policy map for a mode.

    ``lanes="uncontended"`` makes every lane unbounded.  ``contention`` picks
    the parallel server model: ``processor-sharing`` or ``none``.
    """
    mode = ScheduleMode.parse(mode)
    names = {t.lane for t in tasks}
    if lanes == "uncontended":
        return {ln: UNBOUNDED for ln in names}
    if lanes != "exclusive":
        raise ValueError(f"unknown lane policy {lanes!r}")
    pol = {ln: EXCLUSIVE for ln in names}
    if mode is ScheduleMode.PIPELEARN:
        if contention == "processor-sharing":
            pol["server"] = SHARED
        elif contention == "none":
            pol["server"] = UNBOUNDED
        else:
            raise ValueError(f"unknown contention model {contention!r}")
    return pol


def _metrics(mode, K, tasks, res: SimResult) -> RunMetrics:
    mb = sum(t.megabits for t in tasks)
    return RunMetrics(ScheduleMode.parse(mode).value, K, res.makespan, dict(res.lane_busy), mb, res.trace)


def simulate(mode, params, profiles, nets, shapes, devices: int | None = None, *,
             contention: str = "processor-sharing", lanes: str = "exclusive",
             time_model: str = "rows", agg_cost: float = AGG_SECONDS_PER_MPARAM,
             record: bool = True) -> RunMetrics:
    """Simulate one epoch.

    ``params``, ``profiles``, ``nets`` and ``shapes`` are single values shared
    by every device or per-device lists.  ``time_model="rows"`` charges a
    micro-batch ``(B // N) / B`` of the full-batch cost; ``"even"`` charges
    ``1 / N`` like the estimator.
    """
    mode = ScheduleMode.parse(mode)
    if mode is ScheduleMode.FEDERATED:
        return simulate_fl(profiles, nets, shapes, devices, agg_cost=agg_cost, record=record)
    tasks = build_epoch_tasks(mode, params, profiles, nets, shapes, devices, time_model, agg_cost)
    K = sum(1 for t in tasks if t.name.startswith("model_up"))
    res = run_tasks(tasks, lane_policies(mode, tasks, contention, lanes), record=record)
    return _metrics(mode, K, tasks, res)


def simulate_fl(profiles, nets, shapes, devices: int | None = None, epochs_per_round: int = 1, *,
                agg_cost: float = AGG_SECONDS_PER_MPARAM, record: bool = True) -> RunMetrics:
    """Classic federated learning: full local training, then one aggregation round."""
    tasks = build_epoch_tasks(ScheduleMode.FEDERATED, None, profiles, nets, shapes, devices,
                              agg_cost=agg_cost, epochs_per_round=epochs_per_round)
    K = sum(1 for t in tasks if t.name.startswith("model_up"))
    res = run_tasks(tasks, lane_policies(ScheduleMode.FEDERATED, tasks), record=record)
    return _metrics(ScheduleMode.FEDERATED, K, tasks, res)


@lru_cache(maxsize=256)
def _iteration_plan(N: int) -> tuple:
    b = _Builder()
    _split_iterations(b, 0, 1, N, _UNIT_PROFILE, _UNIT_NET, 1.0, 1)
    tasks = b.tasks
    kinds = [StageKind(t.priority[3]) for t in tasks]
    return tasks, _plan(tasks), kinds


@lru_cache(maxsize=512)
def _iteration_policy(N: int, lanes: str) -> list:
    tasks, plan, _ = _iteration_plan(N)
    pol = lane_policies(ScheduleMode.PIPELEARN, tasks, "none", lanes)
    return [pol[ln] for ln in plan.lane_names]


def simulate_iteration(P: int, N: int, profile: LayerProfiles, net: NetworkProfile, *,
                       lanes: str = "exclusive", fraction: float | None = None,
                       record: bool = False) -> RunMetrics:
    """One pipelined iteration of a single device, no aggregation."""
    frac = 1.0 / N if fraction is None else fraction
    per_kind = stage_work(P, N, profile, net, frac)
    tasks, plan, kinds = _iteration_plan(N)
    work = [per_kind[kd] for kd in kinds]
    pol = _iteration_policy(N, lanes)
    res = _execute(plan, work, pol, record)
    mb = (profile.forward_volume[P - 1] + profile.backward_volume[P - 1]) * frac * N
    return RunMetrics(ScheduleMode.PIPELEARN.value, 1, res.makespan, res.lane_busy, float(mb), res.trace)


def true_epoch_time(params: PipelineParams, profile: LayerProfiles, net: NetworkProfile,
                    shape: EpochShape, mode="pipelearn", devices: int = 1, *,
                    time_model: str = "rows", agg_cost: float = AGG_SECONDS_PER_MPARAM,
                    contention: str = "processor-sharing") -> float:
    """Simulated epoch time.

    A single device starts each iteration with every lane empty, so its epoch
    is ``iterations x (one simulated iteration) + aggregation``; that shortcut
    is used for ``devices == 1``.
    """
    mode = ScheduleMode.parse(mode)
    if devices > 1 or mode is ScheduleMode.FEDERATED:
        return simulate(mode, params, profile, net, shape, devices, contention=contention,
                        time_model=time_model, agg_cost=agg_cost, record=False).epoch_makespan
    N = 1 if mode is ScheduleMode.CONVENTIONAL else params.N
    frac = _micro_fraction(N, shape.batch_size, time_model)
    it = simulate_iteration(params.P, N, profile, net, fraction=frac).epoch_makespan
    mb = profile.model_megabits(0, params.P)
    agg_params = float(profile.params[:params.P].sum() if mode is ScheduleMode.CONVENTIONAL
                       else profile.params.sum())
    tail = mb / net.uplink + aggregation_time(agg_params, 1, agg_cost) + mb / net.downlink
    return shape.iterations(N) * it + tail


def exhaustive_search(profiles: LayerProfiles, net: NetworkProfile, shape: EpochShape,
                      mode="pipelearn", P_range: Iterable[int] | None = None,
                      N_range: Iterable[int] | None = None, devices: int = 1, **sim_kwargs):
    """Simulate every (P, N) pair; returns ``(best params, best time, table)``.

    Pairs that leave empty micro-batches or no full iteration get ``inf`` in
    the table.  Ties go to the smaller P, then the smaller N.
    """
    P_range = list(range(1, profiles.Q + 1) if P_range is None else P_range)
    N_range = list(range(1, shape.batch_size + 1) if N_range is None else N_range)
    if not P_range or not N_range:
        raise ValueError("empty search range")
    table: dict[tuple[int, int], float] = {}
    for P in P_range:
        for N in N_range:
            try:
                shape.iterations(N)
            except ValueError:
                table[(P, N)] = math.inf
                continue
            table[(P, N)] = true_epoch_time(PipelineParams(P, N), profiles, net, shape, mode,
                                            devices, **sim_kwargs)
    (P, N), best = min(table.items(), key=lambda kv: (kv[1], kv[0]))
    if not math.isfinite(best):
        raise ValueError("no feasible (P, N) pair in the search range")
    return PipelineParams(P, N), best, table
