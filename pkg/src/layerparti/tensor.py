"""Minimal reverse-mode autodiff on top of numpy.

Every op that touches a tensor with ``requires_grad`` appends a record to the
active :class:`Tape`; :func:`backward` replays the tape in reverse. Tensors with
``requires_grad=False`` never get a gradient buffer, which is what makes a
frozen parameter group mechanically frozen.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

_dtype = np.float32
_grad_enabled = True


def default_dtype():
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with.

    Only the finite-difference oracles in the test suite use this (float64).
    """
    global _dtype
    old, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = old


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    old, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = old


class Rng:
    """Seeded random stream (PCG64, reproducible across platforms)."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def random(self, shape):
        return self.gen.random(shape)

    def spawn(self, stream: int) -> "Rng":
        """Independent child stream keyed by an integer."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(int(stream),))
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child.gen = np.random.Generator(np.random.PCG64(ss))
        return child

    def get_state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state


@dataclass
class Record:
    op: str
    parents: tuple
    output: "Tensor"
    backward: Callable
    index: int = -1


@dataclass
class Tape:
    records: list = field(default_factory=list)

    def append(self, rec: Record) -> None:
        rec.index = len(self.records)
        self.records.append(rec)

    def clear(self) -> None:
        for rec in self.records:
            rec.output._record = None
        self.records = []

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.pop()


_tapes: list[Tape] = [Tape()]


def current_tape() -> Tape:
    return _tapes[-1]


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._record: Record | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: add(self, neg(_lift(o)))
    __rsub__ = lambda self, o: add(o, neg(self))
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / o)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self):
        return mul(sum_(self), 1.0 / self.size)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._record = None
    out._tape = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        tape = current_tape()
        rec = Record(op, tuple(parents), out, backward_fn)
        tape.append(rec)
        out._record = rec
        out._tape = tape
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor, retain_tape: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._record is None:
        if not loss.requires_grad or loss._tape is not None:
            raise UsageError("loss is not on the tape (already backpropagated?)")
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = loss._tape
    pending = {id(loss): seed}
    for rec in reversed(tape.records[: loss._record.index + 1]):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        for t, gi in zip(rec.parents, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._record is None:
                gi = gi.astype(t.data.dtype, copy=False)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                pending[key] = gi if key not in pending else pending[key] + gi
    if not retain_tape:
        tape.clear()


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return _make("add", data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        s = float(b)  # a numpy float64 scalar would promote float32 data
        return _make("scale", a.data * s, (a,), lambda g: (g * s,))
    if not isinstance(a, Tensor) and np.isscalar(a):
        return mul(b, a)
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return _make("mul", data, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
        _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
    ))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    th = np.tanh(u)
    out = 0.5 * x.data * (1.0 + th)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th * th) * du),)

    return _make("gelu", out, (x,), bw)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {old} -> {tuple(shape)}") from None
    return _make("reshape", data, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make("getitem", x.data[idx], (x,), bw)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids, g)
        return (out,)

    return _make("embedding", weight.data[ids], (weight,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", s, (x,),
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make("log_softmax", out, (x,),
                 lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd / d * (d * dxhat - dxhat.sum(-1, keepdims=True)
                             - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _make("layer_norm", out, (x, gamma, beta), bw)


def dropout(x: Tensor, rate: float, rng: Rng, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.data.dtype) * x.data.dtype.type(1.0 / (1.0 - rate))
    return _make("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    b, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    loss = (lse - shifted[rows, labels]).mean()

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _make("cross_entropy", np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def mse(a: Tensor, target) -> Tensor:
    """Mean squared error over every entry; ``target`` is a constant."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=a.data.dtype)
    if a.shape != t.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {t.shape}")
    diff = a.data - t
    n = diff.size
    return _make("mse", np.asarray((diff * diff).mean(), dtype=a.data.dtype), (a,),
                 lambda g: (diff * (2.0 * g / n),))
