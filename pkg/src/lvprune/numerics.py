"""Dense float64 tensor kernels with reverse-mode autodiff.

Every differentiable operation used by the pruning, model, and training
code lives here.  A ``Tensor`` wraps a numpy float64 array; each operation
records a backward closure, and ``Tensor.backward`` replays them in reverse
topological order.  Gradients for trainable leaves are exact up to rounding
and are validated against central finite differences (`finite_diff_check`).

All operations are pure functions of their inputs (and an explicit
``SeededRng`` where randomness is involved), so they are safe to call from
multiple threads as long as each in-flight graph is confined to one thread.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1
_EXP_CLIP = 700.0  # exp() of anything above this overflows float64
_GUMBEL_EPS = 1e-10


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """A mask row admits no entries (all-zero mask row)."""


# ---------------------------------------------------------------------------
# deterministic randomness


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class SeededRng:
    """Deterministic random stream identified by (seed, stream).

    Identical (seed, stream) pairs yield identical draw sequences on every
    platform.  ``derive`` mixes keys into the stream id so independent
    consumers (data generation, parameter init, per-step noise) get
    disjoint streams from one user-facing seed.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._gen = np.random.default_rng([self.seed, self.stream])

    def derive(self, *keys: int) -> "SeededRng":
        stream = self.stream
        for key in keys:
            stream = _splitmix64(stream ^ _splitmix64(int(key) & _MASK64))
        return SeededRng(self.seed, stream)

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, k: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state(self) -> dict:
        return {
            "seed": self.seed,
            "stream": self.stream,
            "bit_generator": self._gen.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        rng = cls(state["seed"], state["stream"])
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng


def sample_gumbel(shape, rng: SeededRng) -> np.ndarray:
    """Standard Gumbel draws, -log(-log(u)) with u clamped off (0, 1) endpoints."""
    u = np.clip(rng.uniform(shape), _GUMBEL_EPS, 1.0 - _GUMBEL_EPS)
    return -np.log(-np.log(u))


# ---------------------------------------------------------------------------
# matmul instrumentation

_FLOP_COUNTERS: list["FlopCounter"] = []


class FlopCounter:
    """Accumulates 2*m*k*n per recorded matmul (forward passes only)."""

    def __init__(self):
        self.flops = 0


@contextmanager
def matmul_flop_counter() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    _FLOP_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _FLOP_COUNTERS.remove(counter)


# ---------------------------------------------------------------------------
# tensor and tape


class Tensor:
    """A float64 array plus the tape node that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Replay the tape, accumulating gradients into trainable leaves."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._parents = tuple(p for p in parents if p.requires_grad)
    out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural operations


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    data = a.data * c

    def backward(g):
        _accum(a, g * c)

    return _node(data, (a,), backward)


def matmul(a, b) -> Tensor:
    """Stacked matrix product over the last two axes, 2 FLOPs per MAC counted."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    if _FLOP_COUNTERS:
        flops = 2 * a.data.shape[-1] * data.size
        for counter in _FLOP_COUNTERS:
            counter.flops += flops

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _node(data, (a, b), backward)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    inverse = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def backward(g):
        _accum(a, np.transpose(g, inverse))

    return _node(data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(data, (a,), backward)


def take(a, indices, axis: int) -> Tensor:
    """Select indices along an axis (same selection for every leading batch)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = np.take(a.data, idx, axis=axis)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(np.moveaxis(buf, axis, 0), idx, np.moveaxis(g, axis, 0))
        _accum(a, buf)

    return _node(data, (a,), backward)


def take_per_sample(a, indices) -> Tensor:
    """Gather rows along axis 1 with a per-sample index matrix.

    a: (B, N, d); indices: (B, k) -> (B, k, d).
    """
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.data.shape[0]:
        raise DimensionError("take_per_sample expects (B, N, d) and (B, k)")
    data = np.take_along_axis(a.data, idx[:, :, None], axis=1)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (np.arange(idx.shape[0])[:, None], idx), g)
        _accum(a, buf)

    return _node(data, (a,), backward)


def embedding_rows(table, ids) -> Tensor:
    """Row lookup table[ids] with scatter-add backward into the table."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.intp)
    data = table.data[idx]

    def backward(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        _accum(table, buf)

    return _node(data, (table,), backward)


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            _accum(t, np.moveaxis(moved[lo:hi], 0, axis))

    return _node(data, tuple(ts), backward)


def slice_last(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    data = a.data[..., start:stop].copy()

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[..., start:stop] = g
        _accum(a, buf)

    return _node(data, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinear operations


def row_softmax(a) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        u = (g * p).sum(axis=-1, keepdims=True)
        _accum(a, p * (g - u))

    return _node(p, (a,), backward)


def masked_row_softmax(a, m) -> Tensor:
    """Multiplicatively masked softmax over the last axis.

    entry (i,j) = exp(a_ij) * m_ij / sum_k exp(a_ik) * m_ik.  Masked entries
    are exactly zero.  Stabilization subtracts the row max over admissible
    (m > 0) entries only, so values at fully masked positions can never leak
    into admissible ones — not even through the shared max.  The backward
    pass produces gradients for both the scores and the mask; mask gradients
    are nonzero even where the mask is currently 0, which is what lets a
    drop decision receive "should have kept it" pressure.
    """
    a, m = as_tensor(a), as_tensor(m)
    a_full = a.data
    m_full = np.broadcast_to(m.data, np.broadcast_shapes(a.data.shape, m.data.shape))
    if a_full.shape != m_full.shape:
        a_full = np.broadcast_to(a_full, m_full.shape)
    admissible = m_full > 0
    if not admissible.any(axis=-1).all():
        raise DegenerateRowError("mask row with no admissible entries")
    row_max = np.where(admissible, a_full, -np.inf).max(axis=-1, keepdims=True)
    e = np.exp(np.clip(a_full - row_max, None, _EXP_CLIP))
    w = e * m_full
    z = w.sum(axis=-1, keepdims=True)
    p = w / z

    def backward(g):
        u = (g * p).sum(axis=-1, keepdims=True)
        if a.requires_grad:
            _accum(a, _unbroadcast(p * (g - u), a.data.shape))
        if m.requires_grad:
            _accum(m, _unbroadcast((e / z) * (g - u), m.data.shape))

    return _node(p, (a, m), backward)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            gx = g * gain.data
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * term)

    return _node(data, (x, gain, bias), backward)


def silu(x) -> Tensor:
    """x * sigmoid(x), elementwise."""
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-np.clip(x.data, -_EXP_CLIP, _EXP_CLIP)))
    data = x.data * sig

    def backward(g):
        _accum(x, g * sig * (1.0 + x.data * (1.0 - sig)))

    return _node(data, (x,), backward)


def hard_one_hot_st(soft) -> Tensor:
    """Row-argmax one-hot forward; straight-through identity backward.

    The forward value is the hard one-hot of the last axis (ties resolved
    to the lowest index); the gradient flows to the soft input unchanged.
    """
    soft = as_tensor(soft)
    idx = soft.data.argmax(axis=-1)
    data = np.zeros_like(soft.data)
    np.put_along_axis(data, idx[..., None], 1.0, axis=-1)

    def backward(g):
        _accum(soft, g)

    return _node(data, (soft,), backward)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.sum())

    def backward(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _node(data, (a,), backward)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    data = np.asarray(a.data.mean())

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _node(data, (a,), backward)


def mean_last(a) -> Tensor:
    """Mean over the last axis."""
    a = as_tensor(a)
    n = a.data.shape[-1]
    data = a.data.mean(axis=-1)

    def backward(g):
        _accum(a, np.broadcast_to(g[..., None] / n, a.data.shape).copy())

    return _node(data, (a,), backward)


def cross_entropy_mean(logits, targets) -> Tensor:
    """Mean negative log-softmax probability of the target class.

    logits: (..., C); targets: integer array of shape (...).
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.intp)
    if t.shape != logits.data.shape[:-1]:
        raise DimensionError("targets shape must match logits batch shape")
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = logits.data - m - np.log(z)
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    n = picked.size
    data = np.asarray(-picked.mean())

    def backward(g):
        p = e / z
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
        _accum(logits, (p - onehot) * (g / n))

    return _node(data, (logits,), backward)


def huber(a, beta: float) -> Tensor:
    """Elementwise Huber penalty: 0.5*x^2 inside |x|<=beta, linear outside."""
    a = as_tensor(a)
    absd = np.abs(a.data)
    data = np.where(absd <= beta, 0.5 * a.data * a.data, beta * (absd - 0.5 * beta))

    def backward(g):
        _accum(a, g * np.clip(a.data, -beta, beta))

    return _node(data, (a,), backward)


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must rebuild the scalar loss from the current ``params``
    data on every call and be deterministic (fixed noise).  The relative
    error per coordinate is |g - ĝ| / max(|g|, |ĝ|, floor); the floor turns
    the bound into a tight absolute one for near-zero coordinates instead
    of dividing by ~0.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn().data)
            flat[i] = orig - h
            f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(gflat[i]), abs(numeric), floor)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    for p in params:
        p.grad = None
    return worst
