"""Dense tensors with tape-based reverse-mode differentiation.

Every op in this module computes its forward value with numpy and, when a
:class:`Tape` is active and any input requires a gradient, records a closure
that maps the output gradient to input gradients. ``Tape.backward`` replays
the records in reverse and accumulates gradients additively, so a tensor used
twice receives the sum of both contributions.

Example::

    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(sigmoid(w @ x))
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the computation tape."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


# ---------------------------------------------------------------- tape


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded on the innermost active tape.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self.records.append((out, inputs, backward_fn))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every leaf tensor that requires a gradient."""
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("loss was not produced by an op recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in self._produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g if t.grad is None else t.grad + g
        self.records.clear()
        self._produced.clear()


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _active_tape() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    need = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=need)
    if need:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _emit(ad * bd, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _emit(ad @ bd, (a, b), bw)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _emit(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    neg = x.data < 0
    out = np.where(neg, slope * x.data, x.data)
    return _emit(out, (x,), lambda g: (np.where(neg, slope * g, g),))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """PReLU with a single learnable slope (shape ``(1,)``)."""
    x, slope = as_tensor(x), as_tensor(slope)
    neg = x.data < 0
    a = slope.data.reshape(-1)[0]
    out = np.where(neg, a * x.data, x.data)

    def bw(g):
        gx = np.where(neg, a * g, g) if x.requires_grad else None
        gs = np.array([np.sum(g * x.data * neg)], dtype=x.dtype).reshape(slope.shape) if slope.requires_grad else None
        return gx, gs

    return _emit(out, (x, slope), bw)


# ---------------------------------------------------------------- structural


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def slice_rows(x: Tensor, stop: int) -> Tensor:
    """First ``stop`` rows of ``x``."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:stop] = g
        return (full,)

    return _emit(x.data[:stop], (x,), bw)


def scatter_add_rows(index: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """``out[index[i]] += values[i]`` along axis 0, vectorised."""
    out = np.zeros((n_rows,) + values.shape[1:], dtype=values.dtype)
    if index.size == 0:
        return out
    order = np.argsort(index, kind="stable")
    idx = index[order]
    starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
    out[idx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Row gather ``x[index]``; the backward pass scatter-adds."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    return _emit(x.data[index], (x,), lambda g: (scatter_add_rows(index, g, n),))


def segment_starts(segment_ids: np.ndarray, n_segments: int) -> np.ndarray:
    """Start offsets of each segment in a sorted id array.

    Raises when a segment below ``n_segments`` has no members.
    """
    segment_ids = np.asarray(segment_ids)
    if segment_ids.size and np.any(segment_ids[1:] < segment_ids[:-1]):
        raise ValueError("segment ids must be sorted")
    counts = np.bincount(segment_ids, minlength=n_segments)
    if counts.size > n_segments or np.any(counts[:n_segments] == 0):
        empty = np.flatnonzero(counts[:n_segments] == 0)
        raise ValueError(f"empty segment(s): {empty[:10].tolist()}")
    return np.r_[0, np.cumsum(counts)[:-1]]


def segment_sum(x: Tensor, segment_ids: np.ndarray, n_segments: int, starts: np.ndarray | None = None) -> Tensor:
    """Sum the rows of ``x`` within each (sorted, non-empty) segment."""
    segment_ids = np.asarray(segment_ids)
    if starts is None:
        starts = segment_starts(segment_ids, n_segments)
    out = np.add.reduceat(x.data, starts, axis=0) if x.shape[0] else np.zeros((n_segments,) + x.shape[1:], x.dtype)
    return _emit(out, (x,), lambda g: (g[segment_ids],))


def segment_softmax(logits: Tensor, segment_ids: np.ndarray, n_segments: int | None = None,
                    starts: np.ndarray | None = None) -> Tensor:
    """Softmax of ``logits`` (shape ``(E,)`` or ``(E, h)``) within segments.

    The per-segment maximum is subtracted before exponentiation.
    """
    logits = as_tensor(logits)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if n_segments is None:
        n_segments = int(segment_ids.max()) + 1 if segment_ids.size else 0
    if starts is None:
        starts = segment_starts(segment_ids, n_segments)
    z = logits.data
    seg_max = np.maximum.reduceat(z, starts, axis=0)
    e = np.exp(z - seg_max[segment_ids])
    denom = np.add.reduceat(e, starts, axis=0)
    alpha = e / denom[segment_ids]

    def bw(g):
        inner = np.add.reduceat(g * alpha, starts, axis=0)
        return (alpha * (g - inner[segment_ids]),)

    return _emit(alpha, (logits,), bw)


# ---------------------------------------------------------------- stochastic / loss


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _emit(x.data * keep, (x,), lambda g: (g * keep,))


def binary_cross_entropy(p: Tensor, y: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Mean BCE with log arguments clamped to ``[eps, 1]``."""
    p = as_tensor(p)
    y = np.asarray(y, dtype=p.dtype).reshape(p.shape)
    n = max(p.data.size, 1)
    pc = np.clip(p.data, eps, 1.0 - eps)
    loss = -np.sum(y * np.log(np.maximum(p.data, eps)) + (1 - y) * np.log(np.maximum(1.0 - p.data, eps))) / n
    inside = (p.data > eps) & (p.data < 1.0 - eps)

    def bw(g):
        return (g * inside * (pc - y) / (pc * (1.0 - pc)) / n,)

    return _emit(np.asarray(loss), (p,), bw)


# ---------------------------------------------------------------- optimiser


class Adam:
    """Adam with bias correction over a dict of named parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        for k, g in grads.items():
            if g.shape != self.params[k].shape:
                raise ShapeError(f"gradient for {k!r} has shape {g.shape}, parameter {self.params[k].shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.lr == 0.0:
                continue
            p = self.params[k]
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}


def adam_step(state: Adam, grads: dict[str, np.ndarray] | None = None) -> None:
    state.step(grads)
