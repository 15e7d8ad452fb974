"""Forecasting models with exact gradients.

Two architectures share one flat parameter representation:

* ``linear``: ``y = weight @ vec(x) + bias`` where ``vec`` flattens the
  ``(W, F)`` window row-major.
* ``lstm``: single-layer LSTM over the W window steps (gate order i, f, g, o)
  followed by a linear head on the final hidden state.

The loss is the mean squared error over every sample and horizon step.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import _rng
from .errors import EmptyBatch, LayoutMismatch, NonFiniteInput


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))


def _check_layout(layout, d):
    pos = 0
    names = set()
    for seg in layout:
        if seg.offset != pos:
            raise LayoutMismatch(f"segment {seg.name} starts at {seg.offset}, expected {pos}")
        if seg.name in names:
            raise LayoutMismatch(f"duplicate segment name {seg.name}")
        names.add(seg.name)
        pos += seg.size
    if pos != d:
        raise LayoutMismatch(f"layout covers {pos} values, vector has {d}")


def layout_from_shapes(shapes) -> tuple[Segment, ...]:
    out, pos = [], 0
    for name, shape in shapes:
        seg = Segment(name, pos, tuple(int(s) for s in shape))
        out.append(seg)
        pos += seg.size
    return tuple(out)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 parameter vector plus the named segments that tile it."""

    values: np.ndarray
    layout: tuple[Segment, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("ParamVector values must be one-dimensional")
        if not np.all(np.isfinite(v)):
            raise NonFiniteInput("ParamVector values must be finite")
        _check_layout(self.layout, v.shape[0])
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __len__(self):
        return self.dim

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"ParamVector(d={self.dim}, segments={[s.name for s in self.layout]})"

    def conformable(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def require_conformable(self, other: "ParamVector"):
        if not self.conformable(other):
            raise LayoutMismatch("parameter layouts differ")

    def segment(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.values[seg.offset : seg.offset + seg.size].reshape(seg.shape)
        raise KeyError(name)

    def unflatten(self) -> dict[str, np.ndarray]:
        return {s.name: self.values[s.offset : s.offset + s.size].reshape(s.shape).copy() for s in self.layout}

    @classmethod
    def flatten(cls, arrays: dict[str, np.ndarray]) -> "ParamVector":
        layout = layout_from_shapes((k, np.shape(v)) for k, v in arrays.items())
        if arrays:
            values = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in arrays.values()])
        else:
            values = np.empty(0)
        return cls(values, layout)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64).copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros(self.dim), self.layout)

    def __add__(self, other):
        self.require_conformable(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other):
        self.require_conformable(other)
        return ParamVector(self.values - other.values, self.layout)

    def __neg__(self):
        return ParamVector(-self.values, self.layout)

    def scale(self, factor: float) -> "ParamVector":
        return ParamVector(self.values * factor, self.layout)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def layout_hash(self) -> int:
        return layout_hash(self.layout)


def layout_hash(layout) -> int:
    """64-bit fingerprint of a layout, used to reject mismatched peers."""
    text = ";".join(f"{s.name}:{s.offset}:{'x'.join(map(str, s.shape))}" for s in layout)
    return struct.unpack("<Q", hashlib.sha256(text.encode()).digest()[:8])[0]


@dataclass(frozen=True)
class ModelArch:
    kind: str = "linear"
    n_features: int = 7
    window: int = 48
    horizon: int = 1
    hidden: int = 32

    def __post_init__(self):
        if self.kind not in ("linear", "lstm"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        for name in ("n_features", "window", "horizon", "hidden"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")

    def shapes(self):
        F, W, H, h = self.n_features, self.window, self.horizon, self.hidden
        if self.kind == "linear":
            return [("weight", (H, W * F)), ("bias", (H,))]
        return [
            ("w_input", (4 * h, F)),
            ("w_hidden", (4 * h, h)),
            ("bias", (4 * h,)),
            ("head_weight", (H, h)),
            ("head_bias", (H,)),
        ]

    def layout(self) -> tuple[Segment, ...]:
        return layout_from_shapes(self.shapes())

    @property
    def dim(self) -> int:
        return sum(s.size for s in self.layout())

    def to_dict(self):
        return {
            "kind": self.kind,
            "n_features": self.n_features,
            "window": self.window,
            "horizon": self.horizon,
            "hidden": self.hidden,
        }


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    delta: ParamVector
    sample_count: int


def init_params(arch: ModelArch, seed: int) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    The LSTM forget-gate bias starts at 1.0.
    """
    rng = _rng.derive_rng(seed, _rng.INIT)
    arrays = {}
    for name, shape in arch.shapes():
        if len(shape) == 2:
            s = 1.0 / np.sqrt(shape[1])
            arrays[name] = rng.uniform(-s, s, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    if arch.kind == "lstm":
        h = arch.hidden
        arrays["bias"][h : 2 * h] = 1.0
    return ParamVector.flatten(arrays)


def _check_inputs(arch, params, X):
    if params.layout != arch.layout():
        raise LayoutMismatch("parameters do not match the architecture")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != (arch.window, arch.n_features):
        raise ValueError(f"expected windows of shape (n, {arch.window}, {arch.n_features}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteInput("features contain NaN or inf")
    return X


def _lstm_forward(p, X, keep=False):
    Wx, Wh, b = p["w_input"], p["w_hidden"], p["bias"]
    n, W, _ = X.shape
    hd = Wh.shape[1]
    h = np.zeros((n, hd))
    c = np.zeros((n, hd))
    cache = []
    for t in range(W):
        z = X[:, t, :] @ Wx.T + h @ Wh.T + b
        i = expit(z[:, :hd])
        f = expit(z[:, hd : 2 * hd])
        g = np.tanh(z[:, 2 * hd : 3 * hd])
        o = expit(z[:, 3 * hd :])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        if keep:
            cache.append((h_prev, c_prev, i, f, g, o, tc))
    return h, cache


def predict(arch: ModelArch, params: ParamVector, X) -> np.ndarray:
    """Batched forward pass: ``(n, W, F)`` windows to ``(n, H)`` forecasts."""
    X = _check_inputs(arch, params, X)
    if arch.kind == "linear":
        w, b = params.segment("weight"), params.segment("bias")
        return X.reshape(X.shape[0], -1) @ w.T + b
    p = {s.name: params.segment(s.name) for s in params.layout}
    h, _ = _lstm_forward(p, X)
    return h @ p["head_weight"].T + p["head_bias"]


def forward(arch: ModelArch, params: ParamVector, features) -> np.ndarray:
    """Forecast for one ``(W, F)`` window."""
    return predict(arch, params, np.asarray(features, dtype=np.float64)[None])[0]


def _batch_arrays(batch):
    X, y = batch.features, batch.targets
    if X.shape[0] == 0:
        raise EmptyBatch("batch has no samples")
    return X, np.asarray(y, dtype=np.float64)


def loss(arch: ModelArch, params: ParamVector, batch) -> float:
    X, y = _batch_arrays(batch)
    r = predict(arch, params, X) - y
    return float(np.mean(r * r))


def loss_and_gradient(arch: ModelArch, params: ParamVector, batch) -> tuple[float, ParamVector]:
    X, y = _batch_arrays(batch)
    X = _check_inputs(arch, params, X)
    n = X.shape[0]
    if arch.kind == "linear":
        w, b = params.segment("weight"), params.segment("bias")
        flat = X.reshape(n, -1)
        r = flat @ w.T + b - y
        dy = 2.0 * r / r.size
        grads = {"weight": dy.T @ flat, "bias": dy.sum(axis=0)}
        return float(np.mean(r * r)), ParamVector.flatten(grads)

    p = {s.name: params.segment(s.name) for s in params.layout}
    Wx, Wh, Wo = p["w_input"], p["w_hidden"], p["head_weight"]
    hd = Wh.shape[1]
    h_last, cache = _lstm_forward(p, X, keep=True)
    r = h_last @ Wo.T + p["head_bias"] - y
    dy = 2.0 * r / r.size
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(4 * hd)
    dh = dy @ Wo
    dc = np.zeros((n, hd))
    # backpropagation through time over every window step
    for t in range(X.shape[1] - 1, -1, -1):
        h_prev, c_prev, i, f, g, o, tc = cache[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        dWx += dz.T @ X[:, t, :]
        dWh += dz.T @ h_prev
        db += dz.sum(axis=0)
        dh = dz @ Wh
        dc = dc * f
    grads = {
        "w_input": dWx,
        "w_hidden": dWh,
        "bias": db,
        "head_weight": dy.T @ h_last,
        "head_bias": dy.sum(axis=0),
    }
    return float(np.mean(r * r)), ParamVector.flatten(grads)


def gradient(arch: ModelArch, params: ParamVector, batch) -> ParamVector:
    return loss_and_gradient(arch, params, batch)[1]


def central_difference(f, x, eps=1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a vector."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for j in range(x.shape[0]):
        old = x[j]
        x[j] = old + eps
        up = f(x)
        x[j] = old - eps
        down = f(x)
        x[j] = old
        g[j] = (up - down) / (2.0 * eps)
    return g


def finite_diff_gradient(arch: ModelArch, params: ParamVector, batch, eps=1e-5) -> ParamVector:
    _batch_arrays(batch)
    g = central_difference(lambda v: loss(arch, params.with_values(v), batch), params.values, eps)
    return params.with_values(g)


@dataclass
class _Batch:
    features: np.ndarray
    targets: np.ndarray
    anchors: np.ndarray = field(default=None)


def local_train(
    arch: ModelArch,
    start: ParamVector,
    data,
    epochs: int,
    batch_size: int | None,
    lr: float,
    seed: int,
    client_id: int = 0,
) -> ClientUpdate:
    """Mini-batch SGD from ``start``; returns ``trained - start``.

    Each epoch draws a fresh permutation from a generator seeded by ``seed``.
    When the batch covers the whole dataset the natural sample order is kept,
    so one epoch is exactly one full-batch gradient step.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if batch_size is not None and batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    n = len(data)
    if n == 0:
        raise EmptyBatch(f"client {client_id} has no training samples")
    B = n if batch_size is None else min(batch_size, n)
    rng = _rng.derive_rng(seed, _rng.SHUFFLE)
    w = start.values.copy()
    X, y = data.features, data.targets
    for _ in range(epochs):
        if B >= n:
            batches = [(X, y)]
        else:
            perm = rng.permutation(n)
            batches = [(X[perm[k : k + B]], y[perm[k : k + B]]) for k in range(0, n, B)]
        for xb, yb in batches:
            _, g = loss_and_gradient(arch, start.with_values(w), _Batch(xb, yb))
            w = w - lr * g.values
    return ClientUpdate(client_id, ParamVector(w - start.values, start.layout), n)
