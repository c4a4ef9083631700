"""Dense sequential networks in float64 numpy.

Layers compute ``act(x @ W.T + b)`` with ``W`` stored ``(out, in)``.  The loss
is picked from the last activation: softmax outputs train with mean
cross-entropy, anything else with mean squared error (summed over output
columns, averaged over rows).

Backward passes always start from the gradient of the loss with respect to the
network output and walk the layers in reverse, so running a model in one piece
or in two pieces (device part, then server part) executes the same floating
point operations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

ACTIVATIONS = ("relu", "identity", "softmax")
LOSSES = ("cross_entropy", "mse")
MODEL_FORMAT = "pipelearn-model/1"

# lower clip for log/division in the cross-entropy, keeps the gradient finite
_PROB_FLOOR = 1e-300

Grads = List[Tuple[np.ndarray, np.ndarray]]


class ShapeError(ValueError):
    """Dimension mismatch; ``layer`` is the 1-based index of the offending layer (0 = input)."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D C-contiguous float64 array with finite entries."""
    m = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return _check_finite(m, name)


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weights = as_matrix(self.weights, "weights")
        self.bias = np.ascontiguousarray(np.asarray(self.bias, dtype=np.float64)).reshape(-1)
        _check_finite(self.bias, "bias")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != weight rows {self.weights.shape[0]}"
            )

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size


@dataclass
class SequentialModel:
    layers: List[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        self.layers = list(self.layers)
        for q in range(1, len(self.layers)):
            a, b = self.layers[q - 1], self.layers[q]
            if a.out_features != b.in_features:
                raise ShapeError(
                    f"layer {q} outputs {a.out_features} values but layer {q + 1} "
                    f"expects {b.in_features}",
                    layer=q + 1,
                )

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def Q(self) -> int:
        return len(self.layers)

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @property
    def in_features(self) -> int | None:
        return self.layers[0].in_features if self.layers else None

    @property
    def out_features(self) -> int | None:
        return self.layers[-1].out_features if self.layers else None

    def copy(self) -> "SequentialModel":
        return SequentialModel(
            [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def parameters(self) -> list[np.ndarray]:
        """Flat list ``[W1, b1, W2, b2, ...]`` (views, not copies)."""
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    outputs: List[np.ndarray]
    # output of an empty model is its input
    passthrough: np.ndarray | None = None

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1] if self.outputs else self.passthrough


def init_model(widths: Sequence[int], activations: Sequence[str], seed: int = 0) -> SequentialModel:
    """Layers ``widths[i] -> widths[i+1]`` with weights and biases uniform in [-0.5, 0.5]."""
    if len(activations) != len(widths) - 1:
        raise ValueError("need one activation per layer (len(widths) - 1)")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(widths[:-1], widths[1:], activations):
        w = rng.uniform(-0.5, 0.5, size=(fan_out, fan_in))
        b = rng.uniform(-0.5, 0.5, size=fan_out)
        layers.append(DenseLayer(w, b, act))
    return SequentialModel(layers)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "identity":
        return z
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _activation_backward(da: np.ndarray, z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return da * (z > 0.0)
    if kind == "identity":
        return da
    return a * (da - np.sum(da * a, axis=1, keepdims=True))


def forward(model: SequentialModel, batch) -> tuple[np.ndarray, ForwardCache]:
    x = as_matrix(batch, "batch")
    if model.layers and x.shape[1] != model.in_features:
        raise ShapeError(
            f"batch has {x.shape[1]} columns, layer 1 expects {model.in_features}", layer=1
        )
    inputs, pres, outs = [], [], []
    for q, layer in enumerate(model.layers, start=1):
        inputs.append(x)
        with np.errstate(over="ignore", invalid="ignore"):  # reported by _check_finite
            z = x @ layer.weights.T + layer.bias
            x = _activate(z, layer.activation)
        _check_finite(x, f"output of layer {q}")
        pres.append(z)
        outs.append(x)
    cache = ForwardCache(inputs, pres, outs, passthrough=None if model.layers else x)
    return x, cache


def loss_kind(model: SequentialModel) -> str:
    if model.layers and model.layers[-1].activation == "softmax":
        return "cross_entropy"
    return "mse"


def loss_and_grad(output: np.ndarray, label, kind: str) -> tuple[float, np.ndarray]:
    """Mean loss over rows and its gradient with respect to ``output``."""
    y = as_matrix(label, "label")
    if y.shape != output.shape:
        raise ShapeError(f"label shape {y.shape} != output shape {output.shape}")
    rows = output.shape[0]
    if kind == "cross_entropy":
        p = np.maximum(output, _PROB_FLOOR)
        loss = float(-np.sum(y * np.log(p)) / rows)
        grad = -y / p / rows
    elif kind == "mse":
        diff = output - y
        loss = float(np.sum(diff * diff) / rows)
        grad = 2.0 * diff / rows
    else:
        raise ValueError(f"unknown loss {kind!r}")
    if not np.isfinite(loss):
        raise NonFiniteError("loss is not finite")
    return loss, _check_finite(grad, "loss gradient")


def backward_from(model: SequentialModel, cache: ForwardCache, output_grad) -> tuple[Grads, np.ndarray]:
    """Backpropagate a gradient w.r.t. the model output; returns per-layer (dW, db) and the input gradient."""
    g = as_matrix(output_grad, "output gradient")
    if len(cache.inputs) != len(model.layers):
        raise ShapeError("cache does not belong to this model (layer count differs)")
    if model.layers and g.shape != cache.outputs[-1].shape:
        raise ShapeError(f"gradient shape {g.shape} != output shape {cache.outputs[-1].shape}")
    grads: Grads = [None] * len(model.layers)  # type: ignore[list-item]
    for q in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[q]
        x, z, a = cache.inputs[q], cache.pre_activations[q], cache.outputs[q]
        if z.shape[1] != layer.out_features or x.shape[1] != layer.in_features:
            raise ShapeError(f"stale cache at layer {q + 1}", layer=q + 1)
        dz = _activation_backward(g, z, a, layer.activation)
        grads[q] = (dz.T @ x, dz.sum(axis=0))
        g = _check_finite(dz @ layer.weights, f"input gradient of layer {q + 1}")
    return grads, g


def backward(model: SequentialModel, cache: ForwardCache, label, loss: str | None = None):
    """Returns ``(param_grads, input_grad, loss_value)``."""
    kind = loss or loss_kind(model)
    value, g = loss_and_grad(cache.output, label, kind)
    grads, input_grad = backward_from(model, cache, g)
    return grads, input_grad, value


def zero_grads(model: SequentialModel) -> Grads:
    return [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in model.layers]


def add_grads(acc: Grads | None, grads: Grads) -> Grads:
    if acc is None:
        return [(dw.copy(), db.copy()) for dw, db in grads]
    if len(acc) != len(grads):
        raise ShapeError("gradient lists have different lengths")
    return [(aw + gw, ab + gb) for (aw, ab), (gw, gb) in zip(acc, grads)]


def sgd_step(model: SequentialModel, accumulated_grads: Grads, eta: float, n_microbatches: int = 1) -> SequentialModel:
    """``param - eta / n_microbatches * summed_grad`` for every parameter; returns a new model."""
    if n_microbatches < 1:
        raise ValueError("n_microbatches must be >= 1")
    if len(accumulated_grads) != len(model.layers):
        raise ShapeError("one (dW, db) pair per layer required")
    scale = eta / n_microbatches
    layers = []
    for q, (layer, (dw, db)) in enumerate(zip(model.layers, accumulated_grads), start=1):
        if dw.shape != layer.weights.shape or db.shape != layer.bias.shape:
            raise ShapeError(f"gradient shape mismatch at layer {q}", layer=q)
        layers.append(DenseLayer(layer.weights - scale * dw, layer.bias - scale * db, layer.activation))
    return SequentialModel(layers)


def max_abs_diff(a: SequentialModel, b: SequentialModel) -> float:
    if len(a) != len(b):
        raise ShapeError("models have different depth")
    worst = 0.0
    for pa, pb in zip(a.parameters(), b.parameters()):
        if pa.shape != pb.shape:
            raise ShapeError("models have different layer shapes")
        if pa.size:
            worst = max(worst, float(np.max(np.abs(pa - pb))))
    return worst


# -- serialization ---------------------------------------------------------

def model_to_dict(model: SequentialModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "layers": [
            {
                "in": layer.in_features,
                "out": layer.out_features,
                "activation": layer.activation,
                "weights": layer.weights.ravel().tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in model.layers
        ],
    }


def model_from_dict(doc: dict) -> SequentialModel:
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} document")
    layers = []
    for q, spec in enumerate(doc["layers"], start=1):
        w = np.asarray(spec["weights"], dtype=np.float64)
        if w.size != spec["in"] * spec["out"]:
            raise ShapeError(f"layer {q}: {w.size} weights for {spec['out']}x{spec['in']}", layer=q)
        layers.append(DenseLayer(w.reshape(spec["out"], spec["in"]), spec["bias"], spec["activation"]))
    return SequentialModel(layers)


def dumps_model(model: SequentialModel) -> str:
    return json.dumps(model_to_dict(model), separators=(",", ":"))


def loads_model(text: str) -> SequentialModel:
    return model_from_dict(json.loads(text))


def save_model(model: SequentialModel, path) -> None:
    Path(path).write_text(dumps_model(model) + "\n")


def load_model(path) -> SequentialModel:
    return loads_model(Path(path).read_text())


def model_megabits(model: SequentialModel, value_bits: int = 64) -> float:
    """Size of the parameters on the wire, in megabits."""
    return model.n_params * value_bits / 1e6
