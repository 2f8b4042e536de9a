"""Per-point encoder with one global max-pool context and a sigmoid field head.

Layout (``c1, c2, c3`` are the hidden widths)::

    x (n x 3, centred) -> relu(x W1 + b1) -> relu(. W2 + b2) = F   (n x c2)
    G = max over rows of F                                           (c2)
    relu([F, G] W3 + b3)                                             (n x c3)
    sigmoid(. W4 + b4)                                               (n x m)

Gradients are derived by hand; ``loss_and_grad`` is the only backward pass.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import InvalidParams, MalformedHeader, MissingFile, NonFiniteInput, ShapeMismatch

PARAMS_MAGIC = b"MKRW"
DEFAULT_WIDTHS = (64, 128, 128)


@dataclass(frozen=True, eq=False)
class RegressorParams:
    """Weights ``W[k]`` (fan_in x fan_out) and biases ``b[k]`` of the four layers."""

    weights: tuple
    biases: tuple

    def __post_init__(self):
        W = tuple(np.asarray(w) for w in self.weights)
        b = tuple(np.asarray(v) for v in self.biases)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "biases", b)
        if len(W) != 4 or len(b) != 4:
            raise InvalidParams("expected four layers")
        if W[0].shape[0] != 3:
            raise InvalidParams("first layer must take 3 inputs")
        c2 = W[1].shape[1]
        fan_in = (3, W[0].shape[1], 2 * c2, W[2].shape[1])
        for k, (w, v) in enumerate(zip(W, b)):
            if w.ndim != 2 or w.shape[0] != fan_in[k] or v.shape != (w.shape[1],):
                raise InvalidParams(f"layer {k} has inconsistent shape {w.shape} / {v.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
                raise NonFiniteInput(f"layer {k} has non-finite entries")

    @classmethod
    def init(cls, m, rng, widths=DEFAULT_WIDTHS, dtype=np.float32):
        """He-normal weights, zero biases."""
        c1, c2, c3 = widths
        shapes = [(3, c1), (c1, c2), (2 * c2, c3), (c3, m)]
        W = tuple((rng.standard_normal(s) * np.sqrt(2.0 / s[0])).astype(dtype) for s in shapes)
        b = tuple(np.zeros(s[1], dtype=dtype) for s in shapes)
        return cls(W, b)

    @property
    def m(self):
        return self.weights[3].shape[1]

    @property
    def widths(self):
        return (self.weights[0].shape[1], self.weights[1].shape[1], self.weights[2].shape[1])

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self):
        return list(self.weights) + list(self.biases)

    @classmethod
    def from_arrays(cls, arrays):
        return cls(tuple(arrays[:4]), tuple(arrays[4:]))

    def astype(self, dtype):
        return RegressorParams.from_arrays([a.astype(dtype) for a in self.arrays()])

    def flatten(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, flat):
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(flat[pos:pos + a.size], dtype=a.dtype).reshape(a.shape))
            pos += a.size
        return RegressorParams.from_arrays(out)

    def zeros_like(self):
        return RegressorParams.from_arrays([np.zeros_like(a) for a in self.arrays()])

    def equals(self, other):
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def _prepare(params, points):
    x = np.asarray(getattr(points, "points", points))
    if x.ndim != 2 or x.shape[1] != 3 or len(x) == 0:
        raise ShapeMismatch(f"points must be a non-empty n x 3 array, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("points contain non-finite values")
    x = x.astype(params.dtype)
    return x - x.mean(axis=0)


def _forward(params, x):
    W, b = params.weights, params.biases
    a1 = x @ W[0] + b[0]
    h1 = np.maximum(a1, 0)
    a2 = h1 @ W[1] + b[1]
    h2 = np.maximum(a2, 0)
    win = np.argmax(h2, axis=0)  # first maximum: ties go to the lowest row
    glob = h2[win, np.arange(h2.shape[1])]
    cat = np.concatenate([h2, np.broadcast_to(glob, h2.shape)], axis=1)
    a3 = cat @ W[2] + b[2]
    h3 = np.maximum(a3, 0)
    y = expit(h3 @ W[3] + b[3])
    return y, (a1, h1, a2, h2, win, cat, a3, h3)


def forward(params: RegressorParams, points) -> np.ndarray:
    """n x m field in (0, 1); the centroid of ``points`` is removed first."""
    return _forward(params, _prepare(params, points))[0]


def loss_and_grad(params: RegressorParams, points, targets):
    """Mean squared error over all n*m entries and its exact gradient."""
    x = _prepare(params, points)
    T = np.asarray(getattr(targets, "values", targets))
    if T.shape != (len(x), params.m):
        raise ShapeMismatch(f"targets are {T.shape}, expected {(len(x), params.m)}")
    y, (a1, h1, a2, h2, win, cat, a3, h3) = _forward(params, x)
    W = params.weights
    diff = y - T.astype(y.dtype)
    loss = float(np.mean(diff.astype(np.float64) ** 2))

    d4 = (2.0 / diff.size) * diff * y * (1 - y)
    gW4, gb4 = h3.T @ d4, d4.sum(axis=0)
    d3 = (d4 @ W[3].T) * (a3 > 0)
    gW3, gb3 = cat.T @ d3, d3.sum(axis=0)
    dcat = d3 @ W[2].T
    c2 = h2.shape[1]
    dh2 = dcat[:, :c2].copy()
    # Max-pool: the broadcast global feature routes all its gradient to the winner.
    dh2[win, np.arange(c2)] += dcat[:, c2:].sum(axis=0)
    d2 = dh2 * (a2 > 0)
    gW2, gb2 = h1.T @ d2, d2.sum(axis=0)
    d1 = (d2 @ W[1].T) * (a1 > 0)
    gW1, gb1 = x.T @ d1, d1.sum(axis=0)
    grads = RegressorParams((gW1, gW2, gW3, gW4), (gb1, gb2, gb3, gb4))
    return loss, grads


def mean_gradients(grads):
    """Average a sequence of gradients in the given order (order fixes the float result)."""
    arrays = [g.arrays() for g in grads]
    out = [sum(parts[1:], parts[0].copy()) / len(arrays) for parts in zip(*arrays)]
    return RegressorParams.from_arrays(out)


def sgd_step(params: RegressorParams, gradients: RegressorParams, velocity: RegressorParams, learning_rate, momentum):
    """Classical momentum: ``v <- momentum * v - lr * g``; ``w <- w + v``."""
    new_v, new_w = [], []
    for w, g, v in zip(params.arrays(), gradients.arrays(), velocity.arrays()):
        v = (momentum * v - learning_rate * g).astype(w.dtype)
        new_v.append(v)
        new_w.append(w + v)
    return RegressorParams.from_arrays(new_w), RegressorParams.from_arrays(new_v)


def subsample(cloud, targets, n_out: int, rng):
    """Uniform rows without replacement; clouds smaller than ``n_out`` are padded with repeats."""
    points = np.asarray(getattr(cloud, "points", cloud))
    T = np.asarray(getattr(targets, "values", targets))
    n = len(points)
    if len(T) != n:
        raise ShapeMismatch(f"{n} points but {len(T)} target rows")
    if n == 0 or n_out < 1:
        raise InvalidParams("need a non-empty cloud and n_out >= 1")
    if n >= n_out:
        rows = rng.choice(n, size=n_out, replace=False)
    else:
        rows = np.concatenate([rng.permutation(n), rng.integers(0, n, size=n_out - n)])
    return points[rows], T[rows]


def save_params(path, params: RegressorParams):
    """``MKRW``, uint32 layer count, per layer uint32 rows, cols and float32 weights, then all biases."""
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC + struct.pack("<I", 4))
        for w in params.weights:
            f.write(struct.pack("<II", *w.shape))
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
        for v in params.biases:
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_params(path) -> RegressorParams:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path, "file not found")
    data = path.read_bytes()
    if data[:4] != PARAMS_MAGIC or len(data) < 8:
        raise MalformedHeader(path, "missing MKRW magic")
    (count,) = struct.unpack("<I", data[4:8])
    pos, weights = 8, []
    try:
        for _ in range(count):
            r, c = struct.unpack("<II", data[pos:pos + 8])
            pos += 8
            weights.append(np.frombuffer(data, "<f4", r * c, pos).reshape(r, c).astype(np.float32))
            pos += 4 * r * c
        biases = []
        for w in weights:
            biases.append(np.frombuffer(data, "<f4", w.shape[1], pos).astype(np.float32))
            pos += 4 * w.shape[1]
    except (struct.error, ValueError) as exc:
        raise ShapeMismatch(f"truncated parameter file: {exc}", path) from None
    if pos != len(data):
        raise ShapeMismatch(f"{len(data) - pos} trailing bytes", path)
    try:
        return RegressorParams(tuple(weights), tuple(biases))
    except InvalidParams as exc:
        raise MalformedHeader(path, str(exc)) from None
