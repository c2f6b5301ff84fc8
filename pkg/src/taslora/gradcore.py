"""A small reverse-mode autodiff engine over numpy arrays.

Ops record onto the active :class:`Tape` whenever one of their inputs
requires a gradient. ``Tape.backward`` walks the record in reverse creation
order, which is a valid topological order because every node is recorded
after its inputs exist.

Arrays are float32 unless the caller hands in float64 data (used by the
finite-difference checks); ops preserve the input dtype.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)
_mac_counter: contextvars.ContextVar[list | None] = contextvars.ContextVar("macs", default=None)


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, grad={self.requires_grad})"

    # operator sugar for the composite code paths
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.params: dict[str, Tensor] = {}
        self.touched: dict[str, np.ndarray] = {}
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable, partial: bool = False):
        self.nodes.append((out, inputs, backward))
        for t in inputs:
            if t.requires_grad and t.name is not None:
                self.params.setdefault(t.name, t)
                if not partial:
                    self.mark_touched(t, None)

    def mark_touched(self, param: Tensor, region: tuple[slice, ...] | None):
        if param.name is None:
            return
        mask = self.touched.get(param.name)
        if mask is None:
            mask = np.zeros(param.shape, dtype=bool)
            self.touched[param.name] = mask
        if region is None:
            mask[...] = True
        else:
            mask[region] = True

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss for every named parameter on this tape."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = {}
        for name, p in self.params.items():
            g = grads.get(id(p))
            result[name] = np.zeros_like(p.data) if g is None else g.astype(p.data.dtype, copy=False)
        return result


@contextlib.contextmanager
def count_macs():
    """Collect multiply-accumulate counts of matrix products inside the block."""
    box = [0]
    token = _mac_counter.set(box)
    try:
        yield box
    finally:
        _mac_counter.reset(token)


def _count(n: int):
    box = _mac_counter.get()
    if box is not None:
        box[0] += int(n)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, partial: bool = False) -> Tensor:
    tape = _active_tape.get()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.record(out, tuple(inputs), backward, partial=partial)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    dt = x.dtype.type
    inner = dt(_GELU_C) * (x + dt(0.044715) * x**3)
    t = np.tanh(inner)
    out = dt(0.5) * x * (dt(1) + t)

    def back(g):
        dinner = dt(_GELU_C) * (dt(1) + dt(3 * 0.044715) * x**2)
        return (g * (dt(0.5) * (dt(1) + t) + dt(0.5) * x * (dt(1) - t**2) * dinner),)

    return _emit(out, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return _emit(out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1 - out**2),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (a,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit(out.astype(x.data.dtype, copy=False), (x, gamma, beta), back)


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics (batch dims broadcast); both operands at least 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    out = np.matmul(a.data, b.data)
    _count(int(np.prod(batch, dtype=np.int64)) * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _emit(out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T + b with x (..., in), w (out, in), b (out,)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError("linear", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("linear.bias", w.shape, b.shape)
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data.T
    _count(x2.shape[0] * w.shape[0] * w.shape[1])
    if b is not None:
        out = out + b.data
    out = out.reshape(*x.shape[:-1], w.shape[0])
    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _emit(out, inputs, back)


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; every input index must appear in the other operand or the output."""
    ins, out_sub = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s) or any(c not in other and c not in out_sub for c in s):
            raise ValueError(f"einsum spec {spec!r} not supported for gradients")
    try:
        out = np.einsum(spec, a.data, b.data, optimize=True)
    except ValueError:
        raise ShapeError(f"einsum {spec}", a.shape, b.shape) from None

    def back(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return _emit(np.asarray(out), (a, b), back)


# -- shape ops ------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def slice_leading(a: Tensor, shape: Sequence[int]) -> Tensor:
    """View of the leading region a[:s0, :s1, ...]; gradients scatter back into it."""
    shape = tuple(shape)
    if len(shape) != a.ndim or any(s > n or s < 0 for s, n in zip(shape, a.shape)):
        raise ShapeError("slice_leading", a.shape, shape)
    region = tuple(slice(0, s) for s in shape)
    tape = _active_tape.get()
    if tape is not None and a.requires_grad:
        tape.mark_touched(a, region)
    if shape == a.shape:
        return a

    def back(g):
        full = np.zeros_like(a.data)
        full[region] = g
        return (full,)

    return _emit(a.data[region], (a,), back, partial=True)


def getitem(a: Tensor, index) -> Tensor:
    """Indexing with scatter-add backward; supports basic and advanced indices."""
    out = a.data[index]
    tape = _active_tape.get()
    if tape is not None and a.requires_grad:
        tape.mark_touched(a, index)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit(np.array(out, copy=True), (a,), back, partial=True)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _emit(out, tuple(tensors), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if len({t.shape for t in tensors}) != 1:
        raise ShapeError("stack", *(t.shape for t in tensors))
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _emit(out, tuple(tensors), back)


def embedding(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2 or (idx.size and (idx.min() < 0 or idx.max() >= table.shape[0])):
        raise ShapeError("embedding", table.shape, idx.shape)
    return getitem(table, idx)


# -- reductions and losses ------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _emit(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of (N, C) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    logp = log_softmax_np(logits.data)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].astype(np.float64).mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return ((p * (g / n)).astype(logits.data.dtype),)

    return _emit(np.asarray(loss, dtype=logits.data.dtype), (logits,), back)


# -- composite ops ------------------------------------------------------------------

def lstm(inputs: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> Tensor:
    """Single-layer LSTM over a (T, input) sequence; returns hidden states (T, d).

    Gate order in the stacked weights is input, forget, cell, output.
    """
    T = inputs.shape[0]
    d = w_hh.shape[1]
    if w_ih.shape != (4 * d, inputs.shape[1]) or w_hh.shape != (4 * d, d) or bias.shape != (4 * d,):
        raise ShapeError("lstm", inputs.shape, w_ih.shape, w_hh.shape, bias.shape)
    dtype = inputs.data.dtype
    h = constant(np.zeros((1, d), dtype))
    c = constant(np.zeros((1, d), dtype))
    xw = linear(inputs, w_ih, bias)  # input projections for every step at once
    outs = []
    for t in range(T):
        z = add(getitem(xw, slice(t, t + 1)), linear(h, w_hh))
        i = sigmoid(getitem(z, (slice(None), slice(0, d))))
        f = sigmoid(getitem(z, (slice(None), slice(d, 2 * d))))
        gcell = tanh(getitem(z, (slice(None), slice(2 * d, 3 * d))))
        o = sigmoid(getitem(z, (slice(None), slice(3 * d, 4 * d))))
        c = add(mul(f, c), mul(i, gcell))
        h = mul(o, tanh(c))
        outs.append(h)
    return concat(outs, axis=0)


def params_checksum(params: Iterable[Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
