"""Split a model between device and server, micro-batch data, aggregate with FedAvg."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import DenseLayer, SequentialModel, ShapeError, loss_kind


@dataclass
class ModelPair:
    """Device part holds layers ``1..P``, server part ``P+1..Q``.

    ``loss`` is the loss of the complete model; the server needs it even when
    its own part is empty (``P == Q``).
    """

    device_part: SequentialModel
    server_part: SequentialModel
    loss: str

    @property
    def P(self) -> int:
        return len(self.device_part)


def split_model(model: SequentialModel, P: int) -> ModelPair:
    Q = len(model)
    if not 1 <= P <= Q:
        raise ValueError(f"split point P={P} outside [1, {Q}]")
    return ModelPair(
        SequentialModel(model.layers[:P]),
        SequentialModel(model.layers[P:]),
        loss_kind(model),
    )


def join_models(pair: ModelPair) -> SequentialModel:
    """Stack the device layers under the server layers again."""
    if len(pair.device_part) == 0:
        raise ValueError("device part must hold at least one layer (P >= 1)")
    dev, srv = pair.device_part, pair.server_part
    if len(srv) and dev.out_features != srv.in_features:
        raise ShapeError(
            f"seam mismatch: device part emits {dev.out_features}, "
            f"server part expects {srv.in_features}",
            layer=len(dev) + 1,
        )
    return SequentialModel(list(dev.layers) + list(srv.layers))


def microbatch(batch, N: int, labels=None):
    """Cut ``batch`` into ``N`` consecutive slices of ``B // N`` rows.

    The last ``B mod N`` rows are dropped.  With ``labels`` given, returns a
    list of ``(x, y)`` pairs instead of a list of arrays.
    """
    x = np.asarray(batch)
    B = x.shape[0]
    if N < 1:
        raise ValueError("N must be >= 1")
    if B < N:
        raise ValueError(f"cannot cut {B} rows into {N} non-empty micro-batches")
    size = B // N
    xs = [x[n * size:(n + 1) * size] for n in range(N)]
    if labels is None:
        return xs
    y = np.asarray(labels)
    if y.shape[0] != B:
        raise ShapeError("labels and batch have different row counts")
    return [(xn, y[n * size:(n + 1) * size]) for n, xn in enumerate(xs)]


def fedavg(models: Sequence[SequentialModel], dataset_sizes: Sequence[float]) -> SequentialModel:
    """Dataset-size weighted average of identically shaped models."""
    if not models:
        raise ValueError("fedavg needs at least one model")
    if len(models) != len(dataset_sizes):
        raise ValueError("one dataset size per model required")
    sizes = [float(s) for s in dataset_sizes]
    if any(s <= 0 for s in sizes):
        raise ValueError("dataset sizes must be positive")
    ref = models[0]
    for m in models[1:]:
        if len(m) != len(ref) or any(
            a.weights.shape != b.weights.shape or a.activation != b.activation
            for a, b in zip(m.layers, ref.layers)
        ):
            raise ShapeError("fedavg over models with different architectures")
    total = sum(sizes)
    weights = [s / total for s in sizes]
    layers = []
    for q, ref_layer in enumerate(ref.layers):
        w = sum(c * m.layers[q].weights for c, m in zip(weights, models))
        b = sum(c * m.layers[q].bias for c, m in zip(weights, models))
        layers.append(DenseLayer(w, b, ref_layer.activation))
    return SequentialModel(layers)
