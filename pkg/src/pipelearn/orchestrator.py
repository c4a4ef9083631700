"""End-to-end split training of dense models over an in-process transport.

Devices, per-device server sessions and the aggregating coordinator run as
generator processes on a virtual clock.  Processes yield commands
(:class:`Compute`, :class:`Send`, :class:`Recv`, ...) and the kernel resumes
them when the command completes.  Compute time is charged from a cost profile
(``clock="virtual"``) or measured around the numeric work (``clock="wall"``);
transfers always cost ``megabits / Mbps`` on a FIFO channel.

:func:`run_fl_reference` trains the same configuration with classic
federated averaging and serves as the equivalence oracle.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import nn
from .cost import EpochShape, LayerProfiles, NetworkProfile, network
from .optimizer import PipelineParams, select_params
from .partition import ModelPair, fedavg, join_models, split_model
from .sim import AGG_SECONDS_PER_MPARAM, RunMetrics, TraceEvent, aggregation_time, stage_work
from .stages import StageKind

log = logging.getLogger(__name__)

VALUE_BITS = 64


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Training aborted; the message names the epoch, device and stage."""


# -- configuration -------------------------------------------------------------

_MODES = ("pipelearn", "pipelearn-seq")
_CONTENTION = ("processor-sharing", "none")
_CLOCKS = ("virtual", "wall")


@dataclass
class TrainingConfig:
    widths: list = field(default_factory=lambda: [4, 8, 2])
    activations: list = field(default_factory=lambda: ["relu", "softmax"])
    devices: int = 2
    samples_per_device: int = 500
    batch_size: int = 50
    eta: float = 0.1
    epochs: int = 10
    seed: int = 0
    network: str = "4g"
    mode: str = "pipelearn"
    params: Any = "auto"  # "auto", [P, N] or one [P, N] per device
    contention: str = "processor-sharing"
    clock: str = "virtual"
    patience: int | None = None  # early stopping off when None
    tol: float = 1e-4
    validation_size: int = 200
    device_rate: float = 1e6  # multiply-accumulates per second
    server_rate: float = 1e8
    call_overhead_rows: float = 0.0
    device_slowdown: float = 20.0  # wall clock only

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        w, a = list(self.widths), list(self.activations)
        if len(w) < 2 or any(int(x) < 1 for x in w):
            raise ConfigError("widths needs at least two positive entries")
        if len(a) != len(w) - 1:
            raise ConfigError(f"{len(w) - 1} layers need {len(w) - 1} activations, got {len(a)}")
        if any(x not in nn.ACTIVATIONS for x in a):
            raise ConfigError(f"activations must be drawn from {nn.ACTIVATIONS}")
        if w[-1] < 2:
            raise ConfigError("the output layer needs at least two classes")
        for name in ("devices", "samples_per_device", "batch_size", "epochs", "validation_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.samples_per_device < self.batch_size:
            raise ConfigError("each device needs at least one full batch")
        if not (self.eta >= 0 and math.isfinite(self.eta)):
            raise ConfigError("eta must be finite and non-negative")
        if self.mode not in _MODES:
            raise ConfigError(f"mode must be one of {_MODES}")
        if self.contention not in _CONTENTION:
            raise ConfigError(f"contention must be one of {_CONTENTION}")
        if self.clock not in _CLOCKS:
            raise ConfigError(f"clock must be one of {_CLOCKS}")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.device_rate <= 0 or self.server_rate <= 0 or self.device_slowdown <= 0:
            raise ConfigError("rates and slowdown must be positive")
        try:
            network(self.network)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.params != "auto":
            self.device_params()

    @property
    def Q(self) -> int:
        return len(self.widths) - 1

    def device_params(self) -> list[PipelineParams] | None:
        """Explicit per-device parameters, or None for ``"auto"``."""
        if self.params == "auto":
            return None
        raw = self.params
        if len(raw) == 2 and all(isinstance(x, (int, np.integer)) for x in raw):
            raw = [raw] * self.devices
        if len(raw) != self.devices:
            raise ConfigError("params needs one [P, N] pair per device")
        out = []
        for pair in raw:
            try:
                P, N = (int(x) for x in pair)
                p = PipelineParams(P, N)
            except (TypeError, ValueError):
                raise ConfigError(f"bad [P, N] pair {pair!r}") from None
            if p.P > self.Q:
                raise ConfigError(f"split point {p.P} exceeds the {self.Q} layers")
            if p.N > self.batch_size:
                raise ConfigError(f"N={p.N} leaves empty micro-batches for B={self.batch_size}")
            out.append(p)
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainingConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "TrainingConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc.get("training", doc))


def dense_profile(widths: Sequence[int], batch_size: int, device_rate: float = 1e6,
                  server_rate: float = 1e8, value_bits: int = VALUE_BITS,
                  call_overhead_rows: float = 0.0) -> LayerProfiles:
    """Synthetic cost of a dense network: ``in x out`` MACs per row per layer,
    backward twice the forward."""
    w = np.asarray(widths, dtype=np.float64)
    macs = w[:-1] * w[1:] * batch_size
    vol = batch_size * w[1:] * value_bits / 1e6
    return LayerProfiles(
        macs / device_rate, 2 * macs / device_rate, macs / server_rate, 2 * macs / server_rate,
        vol, vol.copy(), params=w[:-1] * w[1:] + w[1:], value_bits=value_bits,
        batch_size=batch_size, name="dense", call_overhead_rows=call_overhead_rows,
    )


def config_profile(cfg: TrainingConfig) -> LayerProfiles:
    return dense_profile(cfg.widths, cfg.batch_size, cfg.device_rate, cfg.server_rate,
                         call_overhead_rows=cfg.call_overhead_rows)


def resolve_params(cfg: TrainingConfig) -> list[PipelineParams]:
    explicit = cfg.device_params()
    if explicit is not None:
        return explicit
    sel = select_params(config_profile(cfg), network(cfg.network),
                        EpochShape(cfg.samples_per_device, cfg.batch_size),
                        mode="sequential" if cfg.mode == "pipelearn-seq" else "parallel",
                        devices=cfg.devices)
    return sel.params * cfg.devices


# -- data ------------------------------------------------------------------------

@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray  # one-hot

    def __len__(self) -> int:
        return self.x.shape[0]


def make_dataset(n: int, features: int, classes: int, seed, separation: float = 2.0) -> Dataset:
    """IID, label-balanced Gaussian blobs, one per class."""
    rng = np.random.default_rng(seed)
    centers = np.random.default_rng(0).normal(0.0, separation, size=(classes, features))
    labels = rng.permutation(np.arange(n) % classes)
    x = centers[labels] + rng.normal(0.0, 1.0, size=(n, features))
    return Dataset(x, np.eye(classes)[labels])


def device_datasets(cfg: TrainingConfig) -> list[Dataset]:
    return [make_dataset(cfg.samples_per_device, cfg.widths[0], cfg.widths[-1], [cfg.seed, 1, k])
            for k in range(cfg.devices)]


def validation_set(cfg: TrainingConfig) -> Dataset:
    return make_dataset(cfg.validation_size, cfg.widths[0], cfg.widths[-1], [cfg.seed, 2])


def epoch_order(cfg: TrainingConfig, k: int, epoch: int) -> np.ndarray:
    """Row order of device ``k`` in ``epoch``; shared by every training mode."""
    return np.random.default_rng([cfg.seed, 3, k, epoch]).permutation(cfg.samples_per_device)


def evaluate(model: nn.SequentialModel, data: Dataset) -> tuple[float, float]:
    out, _ = nn.forward(model, data.x)
    loss, _ = nn.loss_and_grad(out, data.y, nn.loss_kind(model))
    acc = float(np.mean(out.argmax(axis=1) == data.y.argmax(axis=1)))
    return loss, acc


def convergence_check(trace: Sequence[float], patience: int = 5, tol: float = 1e-4) -> bool:
    """True once the best loss has not improved by more than ``tol`` for ``patience`` epochs."""
    if not trace:
        raise ValueError("empty loss trace")
    best, best_at = trace[0], 0
    for i, v in enumerate(trace[1:], start=1):
        if v < best - tol:
            best, best_at = v, i
    return len(trace) - 1 - best_at >= patience


# -- virtual-clock kernel ----------------------------------------------------------

class Kind(str, Enum):
    ACTIVATIONS = "activations"
    ACTIVATION_GRADS = "activation_grads"
    STOP_EPOCH = "stop_epoch"
    DEVICE_MODEL = "device_model"
    GLOBAL_DEVICE_MODEL = "global_device_model"
    STOP_TRAINING = "stop_training"


@dataclass
class Message:
    kind: Kind
    key: tuple = ()
    payload: Any = None
    labels: Any = None
    megabits: float = 0.0
    sent: float = math.nan
    delivered: float = math.nan
    last: bool = False


@dataclass(frozen=True)
class MessageRecord:
    channel: str
    kind: str
    key: tuple
    megabits: float
    sent: float
    delivered: float


class Compute:
    __slots__ = ("lane", "seconds", "label", "work")

    def __init__(self, lane: str, seconds: float, label: str, work: Callable | None = None):
        self.lane, self.seconds, self.label, self.work = lane, seconds, label, work


class Send:
    __slots__ = ("channel", "message")

    def __init__(self, channel: str, message: Message):
        self.channel, self.message = channel, message


class Recv:
    __slots__ = ("channel",)

    def __init__(self, channel: str):
        self.channel = channel


class Wait:
    __slots__ = ("gate",)

    def __init__(self, gate: "Gate"):
        self.gate = gate


class Acquire:
    __slots__ = ("token", "key")

    def __init__(self, token: "Token", key):
        self.token, self.key = token, key


class Kernel:
    def __init__(self, clock: str = "virtual", wall_scale: Callable[[str], float] | None = None):
        self.now = 0.0
        self.clock = clock
        self.wall_scale = wall_scale or (lambda lane: 1.0)
        self._heap: list = []
        self._seq = itertools.count()
        self.lanes: dict[str, "_Lane"] = {}
        self.channels: dict[str, "Channel"] = {}
        self.intervals: list[tuple[str, str, float, float]] = []
        self.messages: list[MessageRecord] = []

    def at(self, t: float, fn, *args) -> None:
        heapq.heappush(self._heap, (t, next(self._seq), fn, args))

    def spawn(self, gen) -> None:
        self.at(self.now, self._step, gen, None)

    def run(self) -> None:
        while self._heap:
            t, _, fn, args = heapq.heappop(self._heap)
            self.now = t
            fn(*args)

    def _step(self, gen, value, error: BaseException | None = None) -> None:
        try:
            cmd = gen.throw(error) if error is not None else gen.send(value)
        except StopIteration:
            return
        if isinstance(cmd, Compute):
            seconds, result = cmd.seconds, None
            if cmd.work is not None:
                t0 = time.perf_counter()
                try:
                    result = cmd.work()
                except (nn.NonFiniteError, nn.ShapeError) as exc:
                    self._step(gen, None, exc)
                    return
                if self.clock == "wall":
                    seconds = (time.perf_counter() - t0) * self.wall_scale(cmd.lane)
            self.lanes[cmd.lane].submit(gen, seconds, cmd.label, result)
        elif isinstance(cmd, Send):
            self.channels[cmd.channel].send(cmd.message)
            self.at(self.now, self._step, gen, None)
        elif isinstance(cmd, Recv):
            self.channels[cmd.channel].receive(gen)
        elif isinstance(cmd, Wait):
            cmd.gate.wait(gen)
        elif isinstance(cmd, Acquire):
            cmd.token.acquire(gen, cmd.key)
        else:
            raise TypeError(f"unknown command {cmd!r}")


class _Lane:
    def __init__(self, kernel: Kernel, name: str):
        self.kernel, self.name = kernel, name

    def _done(self, gen, label, started, result) -> None:
        self.kernel.intervals.append((self.name, label, started, self.kernel.now))
        self.kernel._step(gen, result)


class ExclusiveLane(_Lane):
    def __init__(self, kernel, name):
        super().__init__(kernel, name)
        self.queue: deque = deque()
        self.busy = False

    def submit(self, gen, seconds, label, result) -> None:
        self.queue.append((gen, seconds, label, result))
        if not self.busy:
            self._next()

    def _next(self) -> None:
        if not self.queue:
            self.busy = False
            return
        self.busy = True
        gen, seconds, label, result = self.queue.popleft()
        self.kernel.at(self.kernel.now + seconds, self._finish, gen, label, self.kernel.now, result)

    def _finish(self, gen, label, started, result) -> None:
        self._next()
        self._done(gen, label, started, result)


class UnboundedLane(_Lane):
    def submit(self, gen, seconds, label, result) -> None:
        self.kernel.at(self.kernel.now + seconds, self._done, gen, label, self.kernel.now, result)


class SharedLane(_Lane):
    """Processor sharing: ``m`` resident jobs each progress at rate ``1/m``."""

    _EPS = 1e-12

    def __init__(self, kernel, name):
        super().__init__(kernel, name)
        self.jobs: dict[int, list] = {}
        self.last = 0.0
        self.version = 0
        self._ids = itertools.count()

    def _advance(self) -> None:
        now = self.kernel.now
        if self.jobs:
            dt = (now - self.last) / len(self.jobs)
            for job in self.jobs.values():
                job[0] -= dt
        self.last = now

    def _reschedule(self) -> None:
        self.version += 1
        if self.jobs:
            t = self.kernel.now + max(min(j[0] for j in self.jobs.values()), 0.0) * len(self.jobs)
            self.kernel.at(t, self._tick, self.version)

    def submit(self, gen, seconds, label, result) -> None:
        self._advance()
        self.jobs[next(self._ids)] = [seconds, gen, label, self.kernel.now, result]
        self._reschedule()

    def _tick(self, version) -> None:
        if version != self.version:
            return
        self._advance()
        floor = min(j[0] for j in self.jobs.values()) + self._EPS
        finished = sorted(i for i, j in self.jobs.items() if j[0] <= floor)
        jobs = [self.jobs.pop(i) for i in finished]
        self._reschedule()
        for _, gen, label, started, result in jobs:
            self._done(gen, label, started, result)


class Channel:
    """FIFO link: each message occupies the link for ``megabits / bandwidth``."""

    def __init__(self, kernel: Kernel, name: str, bandwidth: float):
        self.kernel, self.name, self.bandwidth = kernel, name, bandwidth
        self.free_at = 0.0
        self.inbox: deque = deque()
        self.waiter = None

    def send(self, msg: Message) -> None:
        now = self.kernel.now
        start = max(now, self.free_at)
        end = start + msg.megabits / self.bandwidth
        self.free_at = end
        msg.sent = now
        if msg.megabits > 0:
            self.kernel.intervals.append((self.name, f"{msg.kind.value}{msg.key}", start, end))
        self.kernel.at(end, self._deliver, msg)

    def _deliver(self, msg: Message) -> None:
        msg.delivered = self.kernel.now
        self.kernel.messages.append(MessageRecord(self.name, msg.kind.value, msg.key, msg.megabits,
                                                  msg.sent, msg.delivered))
        self.inbox.append(msg)
        self._hand_over()

    def receive(self, gen) -> None:
        if self.waiter is not None:
            raise RuntimeError(f"two receivers on channel {self.name}")
        self.waiter = gen
        self._hand_over()

    def _hand_over(self) -> None:
        if self.waiter is not None and self.inbox:
            gen, self.waiter = self.waiter, None
            self.kernel._step(gen, self.inbox.popleft())


class Gate:
    """Opens once ``count`` arrivals have been signalled; reusable via :meth:`reset`."""

    def __init__(self, kernel: Kernel, count: int):
        self.kernel, self.count, self.arrived, self.waiter = kernel, count, 0, None

    def signal(self) -> None:
        self.arrived += 1
        self._check()

    def wait(self, gen) -> None:
        self.waiter = gen
        self._check()

    def reset(self) -> None:
        self.arrived = 0

    def _check(self) -> None:
        if self.waiter is not None and self.arrived >= self.count:
            gen, self.waiter = self.waiter, None
            self.kernel.at(self.kernel.now, self.kernel._step, gen, None)


class Token:
    """Grants the server to one block at a time, in a fixed key order."""

    def __init__(self, kernel: Kernel, order: Iterable):
        self.kernel = kernel
        self.order = list(order)
        self.pos = 0
        self.waiting: dict = {}

    def acquire(self, gen, key) -> None:
        self.waiting[key] = gen
        self._grant()

    def release(self) -> None:
        self.pos += 1
        self._grant()

    def _grant(self) -> None:
        if self.pos < len(self.order):
            gen = self.waiting.pop(self.order[self.pos], None)
            if gen is not None:
                self.kernel.at(self.kernel.now, self.kernel._step, gen, None)


# -- results -------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    end_time: float


@dataclass
class TrainingResult:
    model: nn.SequentialModel
    metrics: list[RunMetrics]
    trace: list[EpochRecord]
    params: list[PipelineParams]
    messages: list[MessageRecord] = field(default_factory=list)
    converged: bool = False
    history: list[nn.SequentialModel] = field(default_factory=list, repr=False)  # global model per epoch

    def __iter__(self):
        return iter((self.model, self.metrics, self.trace))


def _epoch_metrics(mode: str, K: int, kernel: Kernel, lo: float, hi: float) -> RunMetrics:
    """Lane busy time is the union of intervals clipped to ``[lo, hi]``."""
    by_lane: dict[str, list[tuple[float, float]]] = {}
    events: list[TraceEvent] = []
    mb = sum(m.megabits for m in kernel.messages if lo <= m.sent < hi)
    for lane, label, s, e in kernel.intervals:
        if not lo <= s < hi:
            continue
        by_lane.setdefault(lane, []).append((s, min(e, hi)))
        events.append(TraceEvent(s - lo, lane, label, "start"))
        events.append(TraceEvent(e - lo, lane, label, "finish"))
    busy = {}
    for lane, spans in by_lane.items():
        spans.sort()
        total, cur_s, cur_e = 0.0, None, None
        for s, e in spans:
            if cur_e is None or s > cur_e:
                if cur_e is not None:
                    total += cur_e - cur_s
                cur_s, cur_e = s, e
            else:
                cur_e = max(cur_e, e)
        if cur_e is not None:
            total += cur_e - cur_s
        busy[lane] = total
    for name in kernel.lanes:
        busy.setdefault(name, 0.0)
    for name in kernel.channels:
        busy.setdefault(name, 0.0)
    events.sort(key=lambda ev: (ev.time, ev.event != "finish", ev.lane, ev.task))
    return RunMetrics(mode, K, hi - lo, busy, float(mb), events)


def _check_finite_loss(value: float, epoch: int, where: str) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss in epoch {epoch} at {where}")


def _wall_scale(cfg: TrainingConfig) -> Callable[[str], float]:
    return lambda lane: cfg.device_slowdown if lane.startswith("device") else 1.0


# -- PipeLearn -------------------------------------------------------------------------

def run_training(cfg: TrainingConfig, model: nn.SequentialModel | None = None) -> TrainingResult:
    """Pipelined split training; returns the global model, per-epoch metrics
    and the loss/accuracy trace."""
    cfg.validate()
    K, B = cfg.devices, cfg.batch_size
    params = resolve_params(cfg)
    net = network(cfg.network)
    profile = config_profile(cfg)
    global_model = model.copy() if model is not None else nn.init_model(cfg.widths, cfg.activations, cfg.seed)
    if len(global_model) != cfg.Q:
        raise ConfigError("initial model depth does not match widths")
    loss = nn.loss_kind(global_model)
    data = device_datasets(cfg)
    val = validation_set(cfg)

    kernel = Kernel(cfg.clock, _wall_scale(cfg))
    server_kind = {"processor-sharing": SharedLane, "none": UnboundedLane}[cfg.contention]
    kernel.lanes["server"] = ExclusiveLane(kernel, "server") if cfg.mode == "pipelearn-seq" \
        else server_kind(kernel, "server")
    for k in range(K):
        kernel.lanes[f"device{k}"] = ExclusiveLane(kernel, f"device{k}")
        kernel.channels[f"uplink{k}"] = Channel(kernel, f"uplink{k}", net.uplink)
        kernel.channels[f"downlink{k}"] = Channel(kernel, f"downlink{k}", net.downlink)

    iters = [EpochShape(cfg.samples_per_device, B).iterations(p.N) for p in params]
    work = []
    for p in params:
        frac = (B // p.N) / B
        work.append(stage_work(p.P, p.N, profile, net, frac))
    pairs = [split_model(global_model, p.P) for p in params]
    device_models = [pair.device_part for pair in pairs]
    server_models = [pair.server_part for pair in pairs]

    counts = [0] * K
    uploaded: list = [None] * K
    epoch_losses: list[float] = []
    gate = Gate(kernel, K)
    token = Token(kernel, sorted((e, i, k) for e in range(cfg.epochs)
                                for k in range(K) for i in range(iters[k])))
    seq = cfg.mode == "pipelearn-seq"
    bounds: list[list[float]] = []
    trace: list[EpochRecord] = []
    state = {"model": global_model, "converged": False, "epochs_run": 0}
    history: list[nn.SequentialModel] = []

    def device(k: int):
        P, N = params[k].P, params[k].N
        size = B // N
        w = work[k]
        ds = data[k]
        for epoch in range(cfg.epochs):
            if k == 0:
                bounds.append([kernel.now, math.nan])
            order = epoch_order(cfg, k, epoch)
            log.info("epoch %d device %d: %d of %d rows unused (B mod N = %d per batch)", epoch, k,
                     len(order) - iters[k] * size * N, len(order), B % N)
            for it in range(iters[k]):
                rows = order[it * size * N:(it + 1) * size * N]
                caches = []
                for n in range(N):
                    idx = rows[n * size:(n + 1) * size]
                    out, cache = yield Compute(f"device{k}", w[StageKind.DEVICE_FORWARD], f"fc{k}_{n + 1}@{it}",
                                               lambda idx=idx: nn.forward(device_models[k], ds.x[idx]))
                    caches.append(cache)
                    yield Send(f"uplink{k}", Message(Kind.ACTIVATIONS, (epoch, it, n), out, ds.y[idx],
                                                      out.size * VALUE_BITS / 1e6))
                acc = None
                for n in range(N):
                    msg = yield Recv(f"downlink{k}")
                    if msg.kind is not Kind.ACTIVATION_GRADS or msg.key != (epoch, it, n):
                        raise TrainingError(f"device {k} expected gradients {(epoch, it, n)}, got {msg.kind} {msg.key}")
                    grads, _ = yield Compute(f"device{k}", w[StageKind.DEVICE_BACKWARD], f"bc{k}_{n + 1}@{it}",
                                             lambda c=caches[n], g=msg.payload: nn.backward_from(device_models[k], c, g))
                    acc = nn.add_grads(acc, grads)
                device_models[k] = nn.sgd_step(device_models[k], acc, cfg.eta, N)
            yield Send(f"uplink{k}", Message(Kind.STOP_EPOCH, (epoch,)))
            yield Send(f"uplink{k}", Message(Kind.DEVICE_MODEL, (epoch,), device_models[k], None,
                                              device_models[k].n_params * VALUE_BITS / 1e6))
            msg = yield Recv(f"downlink{k}")
            if msg.kind is not Kind.GLOBAL_DEVICE_MODEL:
                raise TrainingError(f"device {k} expected the global model, got {msg.kind}")
            device_models[k] = msg.payload
            if msg.last:
                stop = yield Recv(f"downlink{k}")
                if stop.kind is not Kind.STOP_TRAINING:
                    raise TrainingError(f"device {k} expected stop_training, got {stop.kind}")
                return

    def session(k: int):
        N = params[k].N
        w = work[k]
        acc = None
        while True:
            msg = yield Recv(f"uplink{k}")
            if msg.kind is Kind.STOP_EPOCH:
                model_msg = yield Recv(f"uplink{k}")
                if model_msg.kind is not Kind.DEVICE_MODEL:
                    raise TrainingError(f"session {k} expected the device model, got {model_msg.kind}")
                uploaded[k] = model_msg.payload
                gate.signal()
                continue
            if msg.kind is not Kind.ACTIVATIONS:
                raise TrainingError(f"session {k} got unexpected {msg.kind}")
            epoch, it, n = msg.key
            if seq and n == 0:
                yield Acquire(token, (epoch, it, k))
            srv = server_models[k]

            def fwd(a=msg.payload, y=msg.labels):
                out, cache = nn.forward(srv, a)
                value, g = nn.loss_and_grad(out, y, loss)
                return value, g, cache

            try:
                value, g, cache = yield Compute("server", w[StageKind.SERVER_FORWARD], f"fs{k}_{n + 1}@{it}", fwd)
            except nn.NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}, device {k}, micro-batch {n + 1}: {exc}") from None
            _check_finite_loss(value, epoch, f"device {k} micro-batch {n + 1}")
            epoch_losses.append(value)
            grads, g_in = yield Compute("server", w[StageKind.SERVER_BACKWARD], f"bs{k}_{n + 1}@{it}",
                                        lambda: nn.backward_from(srv, cache, g))
            acc = nn.add_grads(acc, grads)
            counts[k] += msg.payload.shape[0]
            yield Send(f"downlink{k}", Message(Kind.ACTIVATION_GRADS, msg.key, g_in, None,
                                                g_in.size * VALUE_BITS / 1e6))
            if n == N - 1:
                server_models[k] = nn.sgd_step(srv, acc, cfg.eta, N) if len(srv) else srv
                acc = None
                if seq:
                    token.release()

    def coordinator():
        val_losses: list[float] = []
        for epoch in range(cfg.epochs):
            yield Wait(gate)
            gate.reset()
            full = [join_models(ModelPair(uploaded[k], server_models[k], loss)) for k in range(K)]
            sizes = list(counts)
            agg = aggregation_time(sum(m.n_params for m in full) / K, K, AGG_SECONDS_PER_MPARAM)
            new = yield Compute("server", agg, "fedavg", lambda: fedavg(full, sizes))
            state["model"] = new
            history.append(new)
            for k in range(K):
                counts[k] = 0
            v_loss, v_acc = evaluate(new, val)
            _check_finite_loss(v_loss, epoch, "validation")
            val_losses.append(v_loss)
            train = float(np.mean(epoch_losses)) if epoch_losses else math.nan
            epoch_losses.clear()
            state["epochs_run"] = epoch + 1
            converged = cfg.patience is not None and convergence_check(val_losses, cfg.patience, cfg.tol)
            last = converged or epoch == cfg.epochs - 1
            state["converged"] = converged
            for k in range(K):
                pair = split_model(new, params[k].P)
                server_models[k] = pair.server_part
                yield Send(f"downlink{k}", Message(Kind.GLOBAL_DEVICE_MODEL, (epoch,), pair.device_part, None,
                                                    pair.device_part.n_params * VALUE_BITS / 1e6, last=last))
                if last:
                    yield Send(f"downlink{k}", Message(Kind.STOP_TRAINING, (epoch,)))
            end = max(kernel.channels[f"downlink{k}"].free_at for k in range(K))
            bounds[epoch][1] = end
            trace.append(EpochRecord(epoch, train, v_loss, v_acc, end))
            if last:
                return

    for k in range(K):
        kernel.spawn(device(k))
        kernel.spawn(session(k))
    kernel.spawn(coordinator())
    try:
        kernel.run()
    except nn.NonFiniteError as exc:
        raise TrainingError(f"epoch {len(trace)}: {exc}") from None
    if len(trace) != state["epochs_run"] or not trace:
        raise TrainingError("training stopped before the first aggregation")
    metrics = [_epoch_metrics(cfg.mode, K, kernel, lo, hi) for lo, hi in bounds[:len(trace)]]
    return TrainingResult(state["model"], metrics, trace, params, list(kernel.messages), state["converged"], history)


# -- federated learning reference --------------------------------------------------

def run_fl_reference(cfg: TrainingConfig, model: nn.SequentialModel | None = None) -> TrainingResult:
    """Every device trains the complete model on full batches, then FedAvg
    weighted by dataset size."""
    cfg.validate()
    K, B = cfg.devices, cfg.batch_size
    net = network(cfg.network)
    profile = config_profile(cfg)
    global_model = model.copy() if model is not None else nn.init_model(cfg.widths, cfg.activations, cfg.seed)
    data = device_datasets(cfg)
    val = validation_set(cfg)
    kernel = Kernel(cfg.clock, _wall_scale(cfg))
    kernel.lanes["server"] = ExclusiveLane(kernel, "server")
    for k in range(K):
        kernel.lanes[f"device{k}"] = ExclusiveLane(kernel, f"device{k}")
        kernel.channels[f"uplink{k}"] = Channel(kernel, f"uplink{k}", net.uplink)
        kernel.channels[f"downlink{k}"] = Channel(kernel, f"downlink{k}", net.downlink)
    batch_time = float(profile.device_forward.sum() + profile.device_backward.sum()) * (
        1.0 + profile.call_overhead_rows / profile.batch_size)
    iters = cfg.samples_per_device // B
    local = [global_model.copy() for _ in range(K)]
    gate = Gate(kernel, K)
    bounds: list[list[float]] = []
    trace: list[EpochRecord] = []
    losses: list[float] = []
    state = {"model": global_model, "converged": False}
    history: list[nn.SequentialModel] = []

    def step(k, xb, yb):
        out, cache = nn.forward(local[k], xb)
        grads, _, value = nn.backward(local[k], cache, yb)
        return value, nn.sgd_step(local[k], grads, cfg.eta, 1)

    def device(k: int):
        ds = data[k]
        for epoch in range(cfg.epochs):
            if k == 0:
                bounds.append([kernel.now, math.nan])
            order = epoch_order(cfg, k, epoch)
            for it in range(iters):
                idx = order[it * B:(it + 1) * B]
                value, local[k] = yield Compute(f"device{k}", batch_time, f"local{k}@{it}",
                                                lambda idx=idx: step(k, ds.x[idx], ds.y[idx]))
                _check_finite_loss(value, epoch, f"device {k} batch {it + 1}")
                losses.append(value)
            yield Send(f"uplink{k}", Message(Kind.DEVICE_MODEL, (epoch,), local[k], None,
                                              local[k].n_params * VALUE_BITS / 1e6))
            gate.signal()
            msg = yield Recv(f"downlink{k}")
            local[k] = msg.payload
            if msg.last:
                return

    def server():
        val_losses: list[float] = []
        for epoch in range(cfg.epochs):
            yield Wait(gate)
            gate.reset()
            ups = []
            for k in range(K):
                ups.append((yield Recv(f"uplink{k}")).payload)
            agg = aggregation_time(sum(m.n_params for m in ups) / K, K, AGG_SECONDS_PER_MPARAM)
            new = yield Compute("server", agg, "fedavg", lambda: fedavg(ups, [cfg.samples_per_device] * K))
            state["model"] = new
            history.append(new)
            v_loss, v_acc = evaluate(new, val)
            _check_finite_loss(v_loss, epoch, "validation")
            val_losses.append(v_loss)
            converged = cfg.patience is not None and convergence_check(val_losses, cfg.patience, cfg.tol)
            last = converged or epoch == cfg.epochs - 1
            state["converged"] = converged
            for k in range(K):
                yield Send(f"downlink{k}", Message(Kind.GLOBAL_DEVICE_MODEL, (epoch,), new.copy(), None,
                                                    new.n_params * VALUE_BITS / 1e6, last=last))
            end = max(kernel.channels[f"downlink{k}"].free_at for k in range(K))
            bounds[epoch][1] = end
            trace.append(EpochRecord(epoch, float(np.mean(losses)), v_loss, v_acc, end))
            losses.clear()
            if last:
                return

    for k in range(K):
        kernel.spawn(device(k))
    kernel.spawn(server())
    kernel.run()
    metrics = [_epoch_metrics("fl", K, kernel, lo, hi) for lo, hi in bounds[:len(trace)]]
    return TrainingResult(state["model"], metrics, trace, [], list(kernel.messages), state["converged"], history)
