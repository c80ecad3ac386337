"""Small deterministic feed-forward engine.

Dense layers, four activations, weighted binary cross-entropy, manual
reverse-mode gradients, SGD/Adam and a finite-difference gradient checker.
Everything runs in float64 on batches shaped ``(batch, features)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

Params = Dict[str, np.ndarray]

ACTIVATIONS = ("relu", "sigmoid", "identity", "two_sigmoid")
PROB_EPS = 1e-7
FORMAT_VERSION = 1


class ConfigurationError(ValueError):
    """Raised when shapes or settings of a network are inconsistent."""


class TrainingError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "identity":
        return z
    if kind == "two_sigmoid":
        return 2.0 * sigmoid(z)
    raise ConfigurationError(f"unknown activation {kind!r}")


def activation_grad(a: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of the activation expressed through its output ``a``."""
    if kind == "relu":
        return (a > 0).astype(np.float64)
    if kind == "sigmoid":
        return a * (1.0 - a)
    if kind == "identity":
        return np.ones_like(a)
    if kind == "two_sigmoid":
        # a = 2s, da/dz = 2s(1-s)
        return a * (1.0 - 0.5 * a)
    raise ConfigurationError(f"unknown activation {kind!r}")


def glorot_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, rng, in_dim, out_dim, activation="relu", zero=False):
        if zero:
            weight = np.zeros((out_dim, in_dim))
        else:
            weight = glorot_uniform(rng, out_dim, in_dim)
        return cls(weight, np.zeros(out_dim), activation)


@dataclass
class MlpStack:
    layers: List[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        for i in range(len(self.layers) - 1):
            if self.layers[i].out_dim != self.layers[i + 1].in_dim:
                raise ConfigurationError(
                    f"layer {i} outputs {self.layers[i].out_dim} but layer {i + 1} "
                    f"expects {self.layers[i + 1].in_dim}"
                )

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        in_dim: int,
        dims: Sequence[int],
        activations: Sequence[str],
        zero: bool = False,
    ) -> "MlpStack":
        if len(dims) != len(activations):
            raise ConfigurationError("dims and activations must have equal length")
        if any(d < 1 for d in dims) or in_dim < 1:
            raise ConfigurationError(f"invalid layer dims {in_dim} -> {list(dims)}")
        layers = []
        prev = in_dim
        for d, act in zip(dims, activations):
            layers.append(DenseLayer.init(rng, prev, d, act, zero=zero))
            prev = d
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self, prefix: str) -> Params:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight
            out[f"{prefix}.{i}.bias"] = layer.bias
        return out


def forward(stack: MlpStack, x: np.ndarray) -> List[np.ndarray]:
    """Run ``x`` (batch, in_dim) through the stack, returning every layer's output."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != stack.in_dim:
        raise ConfigurationError(f"input has {x.shape[1]} features, stack expects {stack.in_dim}")
    outs = []
    h = x
    for layer in stack.layers:
        h = activate(h @ layer.weight.T + layer.bias, layer.activation)
        outs.append(h)
    return outs


def stack_backward(
    stack: MlpStack,
    x: np.ndarray,
    outputs: Sequence[np.ndarray],
    grad_outputs: Sequence[Optional[np.ndarray]],
    prefix: str,
    grads: Params,
) -> np.ndarray:
    """Backpropagate through ``stack``.

    ``grad_outputs[i]`` is an extra upstream gradient arriving directly at the
    output of layer ``i`` (or None); the last entry is normally the loss
    gradient. Parameter gradients are accumulated into ``grads``; the gradient
    with respect to ``x`` is returned.
    """
    upstream = None
    for i in range(len(stack.layers) - 1, -1, -1):
        layer = stack.layers[i]
        g = grad_outputs[i]
        if upstream is not None:
            g = upstream if g is None else g + upstream
        if g is None:
            g = np.zeros_like(outputs[i])
        dz = g * activation_grad(outputs[i], layer.activation)
        inp = x if i == 0 else outputs[i - 1]
        _accumulate(grads, f"{prefix}.{i}.weight", dz.T @ inp)
        _accumulate(grads, f"{prefix}.{i}.bias", dz.sum(axis=0))
        upstream = dz @ layer.weight
    return upstream


def _accumulate(grads: Params, key: str, value: np.ndarray):
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


def clip_probabilities(p):
    return np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)


def weighted_bce_loss(predictions, labels, weights) -> float:
    """Weight-normalised binary cross-entropy.

    Predictions at exactly 0 or 1 are clamped to ``[1e-7, 1 - 1e-7]``.
    """
    p = clip_probabilities(predictions)
    y = np.asarray(labels, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if not (p.shape == y.shape == w.shape):
        raise ValueError("predictions, labels and weights must have equal shapes")
    if p.size == 0:
        raise ValueError("empty batch")
    wn = w / w.sum()
    return float(-(wn * (y * np.log(p) + (1.0 - y) * np.log1p(-p))).sum())


def check_finite(grads: Params):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")


def apply_update(params: Params, grads: Mapping[str, np.ndarray], state: OptimizerState) -> Params:
    """Update ``params`` in place and return them.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    state.step += 1
    lr = state.learning_rate
    if state.kind == "sgd":
        for name, g in grads.items():
            params[name] -= lr * g
        return params

    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, theta in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != theta.shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def grad_check(
    loss_fn: Callable[[], float],
    params: Params,
    grads: Mapping[str, np.ndarray],
    h: float = 1e-4,
    max_coords_per_param: int = 20,
    seed: int = 0,
    atol: float = 1e-8,
    pattern_fn: Optional[Callable[[], np.ndarray]] = None,
    stats: Optional[dict] = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` must read the arrays in ``params`` (they are perturbed in
    place and restored). Coordinates are subsampled per parameter. The
    relative error is ``|a - n| / max(|a| + |n|, atol)``, so coordinates
    whose true gradient is ~0 do not blow up the ratio.

    ``pattern_fn``, if given, returns the on/off pattern of every piecewise
    linear unit. A coordinate whose +-h step changes that pattern straddles
    a kink, where the central difference is not a derivative; such
    coordinates are skipped and counted in ``stats["skipped"]``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = 0
    base_pattern = pattern_fn() if pattern_fn is not None else None
    for name in sorted(params):
        theta = params[name]
        flat = theta.reshape(-1)
        analytic = np.asarray(grads.get(name, np.zeros_like(theta))).reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_coords_per_param else rng.choice(n, max_coords_per_param, replace=False)
        for j in idx:
            old = flat[j]
            flat[j] = old + h
            lp = loss_fn()
            kink = base_pattern is not None and not np.array_equal(pattern_fn(), base_pattern)
            flat[j] = old - h
            lm = loss_fn()
            kink = kink or (base_pattern is not None and not np.array_equal(pattern_fn(), base_pattern))
            flat[j] = old
            if kink:
                skipped += 1
                continue
            checked += 1
            numeric = (lp - lm) / (2.0 * h)
            err = abs(analytic[j] - numeric) / max(abs(analytic[j]) + abs(numeric), atol)
            worst = max(worst, err)
    if stats is not None:
        stats.update(checked=checked, skipped=skipped)
    return worst


# -- serialization -------------------------------------------------------------

MAGIC = b"SDNN"


def save_params(path, params: Mapping[str, np.ndarray], meta: Optional[dict] = None):
    """Write parameters to a binary container, or to JSON if ``path`` ends in ``.json``.

    Binary layout: ``b"SDNN"``, uint32 format version, uint32 header length,
    a UTF-8 JSON header (meta, parameter names and shapes in storage order),
    then every array as little-endian float64 in row-major order. The output
    is a pure function of the inputs, so equal models give equal bytes. JSON
    floats are written with ``repr`` and read back exactly.
    """
    path = Path(path)
    names = sorted(params)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "params": [[k, list(np.shape(params[k]))] for k in names],
    }
    if path.suffix == ".json":
        doc = dict(header)
        doc["values"] = {k: np.asarray(params[k], dtype=np.float64).ravel(order="C").tolist() for k in names}
        path.write_text(json.dumps(doc, sort_keys=True))
        return
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.array([FORMAT_VERSION, len(head)], dtype="<u4").tobytes())
        fh.write(head)
        for k in names:
            fh.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes(order="C"))


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(params, meta)``."""
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        _check_version(doc)
        params = {k: np.asarray(doc["values"][k], dtype=np.float64).reshape(shape) for k, shape in doc["params"]}
        return params, doc["meta"]
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ConfigurationError(f"{path} is not a model file")
    version, hlen = np.frombuffer(raw[4:12], dtype="<u4")
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported model format version {int(version)}")
    header = json.loads(raw[12 : 12 + hlen].decode())
    offset = 12 + int(hlen)
    params = {}
    for k, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        params[k] = arr
        offset += 8 * count
    if offset != len(raw):
        raise ConfigurationError(f"{path} has {len(raw) - offset} trailing bytes")
    return params, header["meta"]


def _check_version(header):
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported model format version {header.get('format_version')!r}")
