"""Dense float64 tensors with a reverse-mode gradient tape.

Operations executed while a :class:`Tape` is active record a node whenever
one of their inputs requires a gradient. Outside a tape nothing is recorded,
which doubles as inference mode. Broadcasting is limited to a suffix operand
(``b.shape`` equal to a trailing slice of ``a.shape``), used for biases,
gains and shared attention biases.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

_local = threading.local()


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise ContractError("loss is not connected to a gradient tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, o: add(self, _wrap(o))  # noqa: E731
    __sub__ = lambda self, o: sub(self, _wrap(o))  # noqa: E731
    __mul__ = lambda self, o: scale(self, o) if np.isscalar(o) else mul(self, _wrap(o))  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __neg__ = lambda self: scale(self, -1.0)  # noqa: E731

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already
    topologically sorted. A tape can be consumed by exactly one
    :meth:`backward` call.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple, fn: Callable) -> None:
        if self.consumed:
            raise ContractError("cannot record on a tape that has already run backward")
        out.requires_grad = True
        out._tape = self
        self.nodes.append((out, parents, fn))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise ContractError("backward already ran on this tape; build a new tape")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is self:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                elif p._tape is None:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
        self.nodes = []


def _result(data: np.ndarray, parents: tuple, fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, fn)
    return out


# MAC counting ---------------------------------------------------------------

class MacCounter:
    """Accumulates multiply-accumulate counts of :func:`matmul` per (stage, kind)."""

    def __init__(self):
        self.counts: dict[tuple[str, str], int] = {}
        self._tags: list[tuple[str, str]] = [("other", "other")]

    def add(self, n: int) -> None:
        tag = self._tags[-1]
        self.counts[tag] = self.counts.get(tag, 0) + int(n)

    def total(self, stage: str | None = None, kind: str | None = None) -> int:
        return sum(
            v for (s, k), v in self.counts.items()
            if (stage is None or s == stage) and (kind is None or k == kind)
        )

    def __enter__(self) -> "MacCounter":
        stack = getattr(_local, "counters", None)
        if stack is None:
            stack = _local.counters = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.counters.remove(self)


@contextmanager
def mac_tag(stage: str | None = None, kind: str | None = None):
    """Attribute MACs counted inside the block to ``stage``/``kind``.

    A ``None`` field inherits from the enclosing tag.
    """
    stack = getattr(_local, "counters", None)
    if not stack:
        yield
        return
    counter = stack[-1]
    prev = counter._tags[-1]
    counter._tags.append((stage or prev[0], kind or prev[1]))
    try:
        yield
    finally:
        counter._tags.pop()


def _count(n: int) -> None:
    stack = getattr(_local, "counters", None)
    if stack:
        stack[-1].add(n)


# elementwise ----------------------------------------------------------------

def _check_suffix(a: Tensor, b: Tensor, op: str) -> int:
    if a.shape == b.shape:
        return 0
    lead = a.ndim - b.ndim
    if lead > 0 and a.shape[lead:] == b.shape:
        return lead
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _reduce_lead(g: np.ndarray, lead: int) -> np.ndarray:
    return g.sum(axis=tuple(range(lead))) if lead else g


def add(a: Tensor, b: Tensor) -> Tensor:
    lead = _check_suffix(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, _reduce_lead(g, lead)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    lead = _check_suffix(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -_reduce_lead(g, lead)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    lead = _check_suffix(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, _reduce_lead(g * ad, lead)))


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(x.data * s, (x,), lambda g: (g * s,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    return _result(kernels.gelu_fwd(xd), (x,), lambda g: (kernels.gelu_bwd(xd, g),))


# linear algebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a[..., m, k] @ b[k, n]`` or equal-batch ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    m, k, n = ad.shape[-2], ad.shape[-1], bd.shape[-1]
    if b.ndim == 2:
        batch = int(np.prod(ad.shape[:-2], dtype=np.int64))
        _count(batch * m * k * n)
        out = ad @ bd

        def fn(g):
            return g @ bd.T, ad.reshape(-1, k).T @ g.reshape(-1, n)

        return _result(out, (a, b), fn)
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} differ")
    batch = int(np.prod(ad.shape[:-2], dtype=np.int64))
    _count(batch * m * k * n)
    out = ad @ bd

    def fn_batched(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(out, (a, b), fn_batched)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# reductions and normalisation ------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), fn)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis), 1.0 / n)


def _check_finite(xd: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(xd)):
        raise FloatingPointError(f"{op}: non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    _check_finite(x.data, "softmax")
    axis = axis % x.ndim
    if axis == x.ndim - 1:
        y = kernels.softmax_fwd(x.data)
        return _result(y, (x,), lambda g: (kernels.softmax_bwd(y, g),))
    xd = np.moveaxis(x.data, axis, -1)
    y = np.moveaxis(kernels.softmax_fwd(np.ascontiguousarray(xd)), -1, axis)

    def fn(g):
        yi = np.ascontiguousarray(np.moveaxis(y, axis, -1))
        gi = np.ascontiguousarray(np.moveaxis(g, axis, -1))
        return (np.moveaxis(kernels.softmax_bwd(yi, gi), -1, axis),)

    return _result(y, (x,), fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(xd - m).sum(axis=axis, keepdims=True)) + m
    out = xd - lse
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layernorm: affine shapes {gain.shape}, {bias.shape} vs channels {c}")
    xhat, rstd = kernels.layernorm_fwd(x.data, eps)
    gd = gain.data
    out = xhat * gd + bias.data
    lead = tuple(range(x.ndim - 1))

    def fn(g):
        gx = kernels.layernorm_bwd(g * gd, xhat, rstd)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), fn)


# shape manipulation ----------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes).copy(), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    sizes = [x.shape[axis] for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    cuts = np.cumsum(sizes)[:-1]
    return _result(out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)))


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split: sizes {list(sizes)} do not sum to extent {x.shape[axis]}")
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    shape = x.shape
    outs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(int(lo), int(hi))
        sl = tuple(sl)

        def fn(g, sl=sl):
            full = np.zeros(shape)
            full[sl] = g
            return (full,)

        outs.append(_result(x.data[sl].copy(), (x,), fn))
    return outs


def _check_index(idx: np.ndarray, n: int, op: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{op}: index out of range for extent {n}")
    return idx


def gather_rows(x: Tensor, idx, axis: int = 0) -> Tensor:
    axis = axis % x.ndim
    idx = _check_index(idx, x.shape[axis], "gather_rows")
    shape = x.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, (slice(None),) * axis + (idx,), g)
        return (full,)

    return _result(np.take(x.data, idx, axis=axis), (x,), fn)


def scatter_rows(base: Tensor, idx, rows: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``idx`` (unique) replaced by ``rows``."""
    idx = _check_index(idx, base.shape[0], "scatter_rows")
    if len(np.unique(idx)) != len(idx):
        raise ValueError("scatter_rows: indices must be unique")
    if rows.shape != (len(idx),) + base.shape[1:]:
        raise DimensionError(f"scatter_rows: rows {rows.shape} vs base {base.shape}")
    out = base.data.copy()
    out[idx] = rows.data

    def fn(g):
        gb = g.copy()
        gb[idx] = 0.0
        return gb, g[idx]

    return _result(out, (base, rows), fn)


def expand(x: Tensor, lead: Sequence[int]) -> Tensor:
    """Repeat ``x`` along new leading axes of extents ``lead``."""
    lead = tuple(lead)
    out = np.broadcast_to(x.data, lead + x.shape).copy()
    return _result(out, (x,), lambda g: (g.sum(axis=tuple(range(len(lead)))),))


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))
