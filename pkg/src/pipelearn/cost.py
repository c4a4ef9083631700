"""Per-layer cost profiles, network presets and the per-epoch time estimate.

Units: seconds for times (per full batch of ``B`` rows), megabits for data
volumes, Mbps for bandwidths.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .stages import Stage, StageKind, build_iteration_graph, compose, estimate_makespan, stage_times

PROFILE_FORMAT = "pipelearn-profile/1"
PROFILE_COLUMNS = (
    "q",
    "t_fwd_device_s",
    "t_bwd_device_s",
    "t_fwd_server_s",
    "t_bwd_server_s",
    "v_fwd_Mb",
    "v_bwd_Mb",
    "params",
)


def _vec(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64)).reshape(-1)


@dataclass(frozen=True, eq=False)
class LayerProfiles:
    """Forward/backward time of every layer on the device and on the server,
    plus the size of each layer's output (forward) and output gradient (backward)."""

    device_forward: np.ndarray
    device_backward: np.ndarray
    server_forward: np.ndarray
    server_backward: np.ndarray
    forward_volume: np.ndarray
    backward_volume: np.ndarray
    params: np.ndarray = None  # parameter count per layer; zeros when unknown
    value_bits: int = 64
    batch_size: int = 100
    name: str = "custom"
    # every compute call costs as if it carried this many extra rows
    call_overhead_rows: float = 0.0

    def __post_init__(self):
        v = float(self.call_overhead_rows)
        if not (np.isfinite(v) and v >= 0):
            raise ValueError("call_overhead_rows must be finite and non-negative")
        object.__setattr__(self, "call_overhead_rows", v)
        cols = {}
        for attr in ("device_forward", "device_backward", "server_forward",
                     "server_backward", "forward_volume", "backward_volume"):
            cols[attr] = _vec(getattr(self, attr))
        Q = len(cols["device_forward"])
        params = np.zeros(Q) if self.params is None else _vec(self.params)
        cols["params"] = params
        for attr, v in cols.items():
            if len(v) != Q:
                raise ValueError(f"{attr} has {len(v)} entries, expected {Q}")
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise ValueError(f"{attr} must be finite and non-negative")
            object.__setattr__(self, attr, v)
        if Q < 1:
            raise ValueError("profile needs at least one layer")

    @property
    def Q(self) -> int:
        return len(self.device_forward)

    def split_sums(self, P: int) -> tuple[float, float, float, float]:
        """(device fwd, device bwd, server fwd, server bwd) totals for split point ``P``."""
        return (
            float(self.device_forward[:P].sum()),
            float(self.device_backward[:P].sum()),
            float(self.server_forward[P:].sum()),
            float(self.server_backward[P:].sum()),
        )

    def model_megabits(self, lo: int = 0, hi: int | None = None) -> float:
        """Wire size of the parameters of layers ``lo+1..hi``."""
        return float(self.params[lo:hi].sum()) * self.value_bits / 1e6

    def scaled(self, time_factor: float = 1.0, volume_factor: float = 1.0) -> "LayerProfiles":
        return LayerProfiles(
            self.device_forward * time_factor,
            self.device_backward * time_factor,
            self.server_forward * time_factor,
            self.server_backward * time_factor,
            self.forward_volume * volume_factor,
            self.backward_volume * volume_factor,
            self.params,
            self.value_bits,
            self.batch_size,
            self.name,
            self.call_overhead_rows,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayerProfiles):
            return NotImplemented
        return (
            (self.value_bits, self.batch_size, self.name, self.call_overhead_rows)
            == (other.value_bits, other.batch_size, other.name, other.call_overhead_rows)
            and all(
                np.array_equal(getattr(self, a), getattr(other, a))
                for a in ("device_forward", "device_backward", "server_forward",
                          "server_backward", "forward_volume", "backward_volume", "params")
            )
        )


@dataclass(frozen=True)
class NetworkProfile:
    uplink: float  # Mbps
    downlink: float  # Mbps
    name: str = "custom"

    def __post_init__(self):
        if not (self.uplink > 0 and self.downlink > 0):
            raise ValueError("bandwidths must be strictly positive")


NETWORK_PRESETS = {
    "4g": NetworkProfile(10.0, 25.0, "4g"),
    "4g+": NetworkProfile(20.0, 40.0, "4g+"),
    "wifi": NetworkProfile(50.0, 50.0, "wifi"),
}


def network(name: str) -> NetworkProfile:
    try:
        return NETWORK_PRESETS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown network preset {name!r}; choose from {sorted(NETWORK_PRESETS)}") from None


@dataclass(frozen=True)
class EpochShape:
    dataset_size: int
    batch_size: int

    def __post_init__(self):
        if self.dataset_size < 1 or self.batch_size < 1:
            raise ValueError("dataset and batch sizes must be positive")

    def micro_batch(self, N: int) -> int:
        b = self.batch_size // N
        if b < 1:
            raise ValueError(f"N={N} leaves empty micro-batches for B={self.batch_size}")
        return b

    def iterations(self, N: int = 1) -> int:
        """Training iterations per epoch, each consuming ``N`` micro-batches."""
        it = self.dataset_size // (self.micro_batch(N) * N)
        if it < 1:
            raise ValueError(f"dataset of {self.dataset_size} rows too small for one iteration")
        return it


# -- synthetic profiles ------------------------------------------------------

@dataclass(frozen=True)
class ModelPreset:
    """Per-sample forward MACs, output values and parameter counts for each layer."""

    name: str
    macs: tuple
    outputs: tuple
    params: tuple
    value_bits: int = 32
    # effective speed relative to the reference MAC rates
    device_efficiency: float = 1.0
    server_efficiency: float = 1.0
    call_overhead_rows: float = 6.0


# 32x32 inputs.  vgg5: convs keep spatial size, pooling halves it.  resnet18:
# stride-2 stem plus pooling reach 8x8, each later width halves it.  Per sample.
MODEL_PRESETS = {
    "vgg5-like": ModelPreset(
        "vgg5-like",
        macs=(884_736, 4_718_592, 2_359_296, 524_288, 1_280),
        outputs=(8_192, 4_096, 4_096, 128, 10),
        params=(896, 18_496, 36_928, 524_416, 1_290),
        device_efficiency=0.84,
    ),
    "resnet18-like": ModelPreset(
        "resnet18-like",
        macs=(2_408_448, 4_718_592, 4_718_592, 3_670_016, 4_718_592,
              3_670_016, 4_718_592, 3_670_016, 4_718_592, 5_120),
        outputs=(4_096, 4_096, 4_096, 2_048, 2_048, 1_024, 1_024, 512, 512, 10),
        params=(9_408, 73_728, 73_728, 229_376, 294_912, 917_504, 1_179_648,
                3_670_016, 4_718_592, 5_130),
        device_efficiency=3.4,
        server_efficiency=0.9,
    ),
}

# effective multiply-accumulate rates of the reference device and server
DEVICE_MACS_PER_S = 3e8
SERVER_MACS_PER_S = 5e10
BACKWARD_TO_FORWARD = 2.0


def profile_model(
    preset: str,
    device_speed_factor: float = 1.0,
    server_speed_factor: float = 1.0,
    seed: int = 0,
    batch_size: int = 100,
    jitter: float = 0.05,
) -> LayerProfiles:
    """Synthetic profile: layer times proportional to the preset's MACs, with
    seeded multiplicative jitter standing in for measurement noise."""
    try:
        spec = MODEL_PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown model preset {preset!r}; choose from {sorted(MODEL_PRESETS)}") from None
    if device_speed_factor <= 0 or server_speed_factor <= 0:
        raise ValueError("speed factors must be positive")
    rng = np.random.default_rng(seed)
    Q = len(spec.macs)
    macs = np.asarray(spec.macs, dtype=np.float64) * batch_size
    noise = rng.lognormal(0.0, jitter, size=(4, Q)) if jitter > 0 else np.ones((4, Q))
    dev = macs / (DEVICE_MACS_PER_S * spec.device_efficiency * device_speed_factor)
    srv = macs / (SERVER_MACS_PER_S * spec.server_efficiency * server_speed_factor)
    volume = np.asarray(spec.outputs, dtype=np.float64) * batch_size * spec.value_bits / 1e6
    return LayerProfiles(
        dev * noise[0],
        dev * BACKWARD_TO_FORWARD * noise[1],
        srv * noise[2],
        srv * BACKWARD_TO_FORWARD * noise[3],
        volume,
        volume.copy(),
        params=spec.params,
        value_bits=spec.value_bits,
        batch_size=batch_size,
        name=preset,
        call_overhead_rows=spec.call_overhead_rows,
    )


def uniform_profile(Q: int, device_time: float = 1.0, server_time: float = 0.1,
                    volume: float = 1.0, params: int = 0, batch_size: int = 100) -> LayerProfiles:
    """Every layer identical; backward twice the forward time."""
    ones = np.ones(Q)
    return LayerProfiles(
        device_time * ones, 2 * device_time * ones,
        server_time * ones, 2 * server_time * ones,
        volume * ones, volume * ones,
        params=params * ones, batch_size=batch_size, name=f"uniform-{Q}",
    )


def random_profile(seed: int, Q: int | None = None, q_range=(2, 10), batch_size: int = 100) -> LayerProfiles:
    """Heterogeneous random profile for sweeps.

    Device layer times are log-uniform in [0.02, 1] s per batch, the server is
    5x to 50x faster with per-layer noise, backward passes cost 1.5x to 2.5x
    the forward pass, and output volumes are log-uniform in [0.5, 50] Mb.
    """
    rng = np.random.default_rng(seed)
    if Q is None:
        Q = int(rng.integers(q_range[0], q_range[1] + 1))
    dev_f = np.exp(rng.uniform(np.log(0.02), np.log(1.0), Q))
    dev_b = dev_f * rng.uniform(1.5, 2.5, Q)
    speedup = rng.uniform(5.0, 50.0)
    srv_f = dev_f / speedup * rng.lognormal(0.0, 0.2, Q)
    srv_b = dev_b / speedup * rng.lognormal(0.0, 0.2, Q)
    vol_f = np.exp(rng.uniform(np.log(0.5), np.log(50.0), Q))
    params = rng.integers(1_000, 2_000_000, Q)
    return LayerProfiles(dev_f, dev_b, srv_f, srv_b, vol_f, vol_f.copy(),
                         params=params, value_bits=32, batch_size=batch_size,
                         name=f"random-{seed}")


def live_profile(model, batch, iterations: int = 10, device_slowdown: float = 1.0,
                 timer=time.perf_counter, value_bits: int = 64) -> LayerProfiles:
    """Time the numeric core layer by layer on this host.

    Forward and backward wall times are averaged over ``iterations`` runs.
    The server columns are the raw measurements; device columns are
    multiplied by ``device_slowdown``.  Volumes are exact: rows x width x bits.
    """
    from .nn import _activate, _activation_backward, as_matrix

    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    x0 = as_matrix(batch, "batch")
    rows = x0.shape[0]
    Q = len(model)
    fwd = np.zeros(Q)
    bwd = np.zeros(Q)
    for _ in range(iterations):
        x = x0
        caches = []
        for q, layer in enumerate(model.layers):
            t0 = timer()
            z = x @ layer.weights.T + layer.bias
            a = _activate(z, layer.activation)
            fwd[q] += timer() - t0
            caches.append((x, z, a))
            x = a
        g = np.ones_like(x) / rows
        for q in range(Q - 1, -1, -1):
            layer = model.layers[q]
            xq, z, a = caches[q]
            t0 = timer()
            dz = _activation_backward(g, z, a, layer.activation)
            dz.T @ xq
            dz.sum(axis=0)
            g = dz @ layer.weights
            bwd[q] += timer() - t0
    fwd /= iterations
    bwd /= iterations
    widths = np.array([layer.out_features for layer in model.layers], dtype=np.float64)
    volume = rows * widths * value_bits / 1e6
    return LayerProfiles(
        fwd * device_slowdown, bwd * device_slowdown, fwd, bwd, volume, volume.copy(),
        params=[layer.n_params for layer in model.layers], value_bits=value_bits,
        batch_size=rows, name="live",
    )


# -- profile file format -------------------------------------------------------

def dumps_profile(profile: LayerProfiles) -> str:
    lines = [
        "# pipelearn layer profile; times in seconds per full batch, volumes in megabits",
        f"format = {PROFILE_FORMAT}",
        f"name = {profile.name}",
        f"layers = {profile.Q}",
        f"batch_size = {profile.batch_size}",
        f"value_bits = {profile.value_bits}",
        f"call_overhead_rows = {profile.call_overhead_rows!r}",
        "time_unit = s",
        "volume_unit = Mb",
        "columns = " + " ".join(PROFILE_COLUMNS),
    ]
    for q in range(profile.Q):
        vals = [profile.device_forward[q], profile.device_backward[q],
                profile.server_forward[q], profile.server_backward[q],
                profile.forward_volume[q], profile.backward_volume[q]]
        lines.append(" ".join([str(q + 1)] + [repr(float(v)) for v in vals]
                              + [repr(float(profile.params[q]))]))
    return "\n".join(lines) + "\n"


class ProfileFormatError(ValueError):
    pass


def loads_profile(text: str) -> LayerProfiles:
    header: dict[str, str] = {}
    rows: list[list[float]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line:
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
            continue
        parts = line.split()
        if len(parts) != len(PROFILE_COLUMNS):
            raise ProfileFormatError(f"line {lineno}: expected {len(PROFILE_COLUMNS)} columns, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise ProfileFormatError(f"line {lineno}: non-numeric value") from None
        if int(vals[0]) != len(rows) + 1:
            raise ProfileFormatError(f"line {lineno}: layers must be numbered 1..Q in order")
        rows.append(vals[1:])
    if header.get("format") != PROFILE_FORMAT:
        raise ProfileFormatError(f"missing or unsupported format line (want {PROFILE_FORMAT})")
    if header.get("time_unit", "s") != "s" or header.get("volume_unit", "Mb") != "Mb":
        raise ProfileFormatError("only time_unit = s and volume_unit = Mb are supported")
    if "layers" in header and int(header["layers"]) != len(rows):
        raise ProfileFormatError(f"header says {header['layers']} layers, table has {len(rows)}")
    cols = np.asarray(rows, dtype=np.float64).T
    return LayerProfiles(
        *cols[:6], params=cols[6],
        value_bits=int(header.get("value_bits", 64)),
        batch_size=int(header.get("batch_size", 100)),
        name=header.get("name", "custom"),
        call_overhead_rows=float(header.get("call_overhead_rows", 0.0)),
    )


def save_profile(profile: LayerProfiles, path) -> None:
    Path(path).write_text(dumps_profile(profile))


def load_profile(path) -> LayerProfiles:
    return loads_profile(Path(path).read_text())


# -- epoch estimate ------------------------------------------------------------

def iteration_estimate(P: int, N: int, profile: LayerProfiles, net: NetworkProfile,
                       mode: str = "parallel", devices: int = 1) -> float:
    """Estimated makespan of one iteration.

    ``parallel`` estimates each device on its own (server contention is not
    modelled).  ``sequential`` chains the server stages of ``devices``
    identical devices one device after another.
    """
    if mode == "parallel" or devices == 1:
        return estimate_makespan(build_iteration_graph(N), stage_times(P, N, profile, net))
    if mode != "sequential":
        raise ValueError(f"unknown estimator mode {mode!r}")
    graphs, times, extra = [], {}, []
    for k in range(devices):
        graphs.append(build_iteration_graph(N, k))
        times.update(stage_times(P, N, profile, net, k=k))
        if k:
            extra.append((Stage(StageKind.SERVER_BACKWARD, N, k - 1), Stage(StageKind.SERVER_FORWARD, 1, k)))
    return estimate_makespan(compose(graphs, extra), times)


def epoch_time(P: int, N: int, profiles: LayerProfiles, net: NetworkProfile, shape: EpochShape,
               mode: str = "parallel", devices: int = 1) -> float:
    """Iterations per epoch times the estimated iteration makespan."""
    return shape.iterations(N) * iteration_estimate(P, N, profiles, net, mode, devices)
