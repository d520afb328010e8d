"""Dense float64 kernels with explicit forward/backward pairs.

There is no autograd graph: every primitive returns its output together
with a cache, and a matching *_backward function consumes the cache plus
the upstream gradient.  Composite models chain the backward calls by hand
in reverse order.  All math is 64-bit so central finite differences at
eps = 1e-6 resolve gradients to ~1e-10 relative error.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class EmptyGroupError(ValueError):
    pass


class KinkProximityError(ValueError):
    """An input sits too close to a non-differentiable point to check."""


def _finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{what} contains NaN/Inf")
    return x


# ---------------------------------------------------------------------------
# Parameters


class Param:
    """A learnable tensor with gradient accumulator and Adam state."""

    __slots__ = ("value", "grad", "m", "v", "step")

    def __init__(self, value: np.ndarray):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class ParamStore:
    """Named parameter map with seed-reproducible initialization.

    Weights use the uniform variance-preserving scheme on
    [-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]; biases start
    at zero.  Initialization draws from one RNG in insertion order, so a
    fixed seed and construction order give bit-identical values.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._params: dict[str, Param] = {}

    def add_weight(self, name: str, rows: int, cols: int) -> Param:
        bound = np.sqrt(6.0 / (rows + cols))
        value = self._rng.uniform(-bound, bound, size=(rows, cols))
        return self._add(name, Param(value))

    def add_bias(self, name: str, size: int) -> Param:
        return self._add(name, Param(np.zeros(size)))

    def add_zeros(self, name: str, shape: tuple[int, ...]) -> Param:
        return self._add(name, Param(np.zeros(shape)))

    def _add(self, name: str, param: Param) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate param name {name!r}")
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def params(self) -> list[Param]:
        return list(self._params.values())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def values(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(values)
        extra = set(values) - set(self._params)
        if missing or extra:
            raise KeyError(f"param name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in values.items():
            p = self._params[name]
            if arr.shape != p.value.shape:
                raise ShapeMismatchError(f"{name}: {arr.shape} != {p.value.shape}")
            p.value[...] = arr


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over every param; zeroes grads after."""
    for p in store.params():
        p.step += 1
        g = p.grad
        p.m[...] = beta1 * p.m + (1.0 - beta1) * g
        p.v[...] = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.value[...] = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# Primitives


def linear_forward(
    x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None
) -> tuple[np.ndarray, tuple]:
    """out[i] = weight @ x[i] (+ bias); x is (n, d_in), weight (d_out, d_in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(f"linear: x {x.shape} vs weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeMismatchError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias
    return _finite(out, "linear output"), (x, weight, bias is not None)


def linear_backward(grad_out: np.ndarray, cache: tuple):
    x, weight, has_bias = cache
    grad_x = grad_out @ weight
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0) if has_bias else None
    return grad_x, grad_w, grad_b


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """1 / (1 + exp(-x)) without overflow on large negative inputs."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_forward(kind: str, x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Elementwise relu / tanh / sigmoid; relu'(0) is defined as 0."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        out = np.maximum(x, 0.0)
    elif kind == "tanh":
        out = np.tanh(x)
    elif kind == "sigmoid":
        out = stable_sigmoid(x)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _finite(out, f"{kind} output"), (kind, x, out)


def activation_backward(grad_out: np.ndarray, cache: tuple) -> np.ndarray:
    kind, x, out = cache
    if kind == "relu":
        return grad_out * (x > 0.0)
    if kind == "tanh":
        return grad_out * (1.0 - out * out)
    return grad_out * out * (1.0 - out)


def hadamard_forward(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Elementwise product."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"hadamard: {a.shape} vs {b.shape}")
    return _finite(a * b, "hadamard output"), (a, b)


def hadamard_backward(grad_out: np.ndarray, cache: tuple):
    a, b = cache
    return grad_out * b, grad_out * a


def pool_forward(
    kind: str,
    groups: Sequence[np.ndarray],
    features: np.ndarray,
    allow_empty: bool = False,
) -> tuple[np.ndarray, tuple]:
    """Pool feature rows per ragged group; kind is "mean" or "max".

    Max pooling is componentwise; its backward routes gradient only to
    each component's argmax row (lowest row index on ties).  Empty groups
    raise EmptyGroupError unless the caller declared the zero fallback via
    allow_empty.

    Group index lists are sorted internally, so any permutation of a
    group's listing produces bit-identical output and gradients.
    """
    if kind not in ("mean", "max"):
        raise ValueError(f"unknown pool kind {kind!r}")
    features = np.asarray(features, dtype=np.float64)
    groups = [np.sort(np.asarray(idx, dtype=np.int64)) for idx in groups]
    d = features.shape[1]
    out = np.zeros((len(groups), d))
    argmax = np.zeros((len(groups), d), dtype=np.int64) if kind == "max" else None
    for gi, idx in enumerate(groups):
        if len(idx) == 0:
            if not allow_empty:
                raise EmptyGroupError(f"group {gi} is empty and no fallback declared")
            if argmax is not None:
                argmax[gi] = -1
            continue
        rows = features[idx]
        if kind == "mean":
            out[gi] = rows.mean(axis=0)
        else:
            where = np.argmax(rows, axis=0)
            out[gi] = rows[where, np.arange(d)]
            argmax[gi] = np.asarray(idx)[where]
    return _finite(out, "pool output"), (kind, groups, features.shape, argmax)


def pool_backward(grad_out: np.ndarray, cache: tuple) -> np.ndarray:
    kind, groups, feat_shape, argmax = cache
    grad = np.zeros(feat_shape)
    d = feat_shape[1]
    cols = np.arange(d)
    for gi, idx in enumerate(groups):
        if len(idx) == 0:
            continue
        if kind == "mean":
            grad[idx] += grad_out[gi] / len(idx)
        else:
            np.add.at(grad, (argmax[gi], cols), grad_out[gi])
    return grad


def softmax_cross_entropy(
    scores: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean negative log softmax likelihood; returns (loss, grad_scores)."""
    scores = _finite(np.asarray(scores, dtype=np.float64), "scores")
    n = scores.shape[0]
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = float(-log_probs[np.arange(n), targets].mean())
    if not np.isfinite(loss):
        raise NonFiniteError("loss is NaN/Inf")
    grad = np.exp(log_probs)
    grad[np.arange(n), targets] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


@dataclass
class GradCheckResult:
    """Outcome of one check: worst relative error across inputs/directions."""

    name: str
    max_rel_err: float
    per_input: list[float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def grad_check(
    func: Callable[[list[np.ndarray]], tuple[np.ndarray, Callable]],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-6,
    tolerance: float = 1e-5,
    n_directions: int = 3,
    seed: int = 0,
    kink_distance: Optional[Callable[[list[np.ndarray]], float]] = None,
    name: str = "op",
) -> GradCheckResult:
    """Compare an op's analytic VJP against central finite differences.

    func takes the list of input arrays and returns (output, vjp) where
    vjp(grad_output) yields one gradient array per input.  The check
    scalarizes the output against a fixed random weighting w, evaluates
    the analytic directional derivative <vjp(w), d> for random unit-free
    directions d, and compares with (F(x + eps d) - F(x - eps d)) / 2eps.

    Relative error is |analytic - numeric| / max(1, |analytic|, |numeric|).
    If kink_distance is given and reports any input within 10 * eps of a
    non-differentiable point, the check refuses to run (KinkProximityError)
    rather than report garbage.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    if kink_distance is not None:
        gap = kink_distance(inputs)
        if gap < 10.0 * eps:
            raise KinkProximityError(
                f"{name}: input within {gap:.3g} of a kink (guard is {10.0 * eps:.3g})"
            )
    rng = np.random.default_rng(seed)
    out, vjp = func(inputs)
    w = rng.standard_normal(out.shape)
    analytic = vjp(w)
    worst = [0.0] * len(inputs)

    def scalar(xs: list[np.ndarray]) -> float:
        y, _ = func(xs)
        return float(np.sum(w * y))

    for i in range(len(inputs)):
        for _ in range(n_directions):
            d = rng.standard_normal(inputs[i].shape)
            plus = [x.copy() for x in inputs]
            minus = [x.copy() for x in inputs]
            plus[i] += eps * d
            minus[i] -= eps * d
            numeric = (scalar(plus) - scalar(minus)) / (2.0 * eps)
            exact = float(np.sum(analytic[i] * d))
            err = abs(exact - numeric) / max(1.0, abs(exact), abs(numeric))
            worst[i] = max(worst[i], err)
    return GradCheckResult(
        name=name, max_rel_err=max(worst), per_input=worst, tolerance=tolerance
    )


# ---------------------------------------------------------------------------
# Checkpoint codec (".dckpt")

CKPT_MAGIC = b"DCKP"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHI")


def encode_checkpoint(values: dict[str, np.ndarray]) -> bytes:
    """Serialize named arrays; entries are written in sorted-name order."""
    parts = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(values))]
    for name in sorted(values):
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(values[name], dtype="<f8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < _CKPT_HEADER.size or data[:4] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    _, version, count = _CKPT_HEADER.unpack_from(data, 0)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = _CKPT_HEADER.size
    values: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", data, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        n_vals = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n_vals, offset=offset)
        offset += 8 * n_vals
        values[name] = arr.reshape(shape).astype(np.float64)
    if offset != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return values


def save_checkpoint(store: ParamStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(store.values()))


def load_checkpoint(store: ParamStore, path) -> None:
    with open(path, "rb") as fh:
        store.load_values(decode_checkpoint(fh.read()))
