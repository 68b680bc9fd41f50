"""Dense tensors with tape-based reverse-mode differentiation.

Ops are recorded only while a :class:`Tape` is active; outside a tape every
op is a plain numpy computation, which is what inference uses.

Broadcasting is limited to leading batch dimensions: the second operand of a
binary op may have a shape that is a suffix of the first operand's shape
(a bias over ``(..., d)``, a scalar gate over anything).  Anything else needs
an explicit reshape at the call site.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numpy as np

LN_EPS = 1e-5

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "flamenav_active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)


class _Op:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Records differentiable ops in execution order.

    Usage::

        with Tape() as tape:
            loss = f(params)
        tape.backward(loss)      # fills ``p.grad`` for every leaf p
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        self.ops.append(_Op(tuple(inputs), output, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss or an explicit grad, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): grad}
        produced = {id(op.output) for op in self.ops}
        leaves: dict[int, Tensor] = {}
        for op in reversed(self.ops):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            in_grads = op.backward(g)
            for t, gi in zip(op.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(t.data.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = _ACTIVE_TAPE.get()
        if tape is not None:
            tape.record(inputs, out, backward)
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _check_suffix(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape == b.shape:
        return
    nb = b.ndim
    if nb > a.ndim or (nb and a.shape[-nb:] != b.shape):
        raise ShapeError(f"{opname}: shape {b.shape} is not a trailing suffix of {a.shape}")


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim > a.ndim:
        a, b = b, a
    _check_suffix(a, b, "add")
    sb = b.shape
    return _result(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b, "sub")
    sb = b.shape
    return _result(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim > a.ndim:
        a, b = b, a
    _check_suffix(a, b, "mul")
    ad, bd = a.data, b.data
    sb = b.shape

    def backward(g):
        ga = g * bd if a.requires_grad else None
        gb = _reduce_to(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)  # a Python float keeps the tensor's dtype
    return _result(x.data * c, (x,), lambda g: (g * c,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))  # float pow is far slower than two multiplies
    th = np.tanh(inner)
    y = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _result(y, (x,), backward)


# ------------------------------------------------------------------ reductions


def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    # contiguous ravel: numpy's pairwise order is then fixed for a given size
    total = np.sum(np.ascontiguousarray(x.data).ravel())
    return _result(np.asarray(total), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(sum_(x), 1.0 / n)


# ------------------------------------------------------------------ structural


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def slice_(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] += g
        return (out,)

    return _result(x.data[idx], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        outs = []
        for i in range(len(xs)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    try:
        data = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}") from err
    return _result(data, xs, backward)


def embedding(table: Tensor, indices) -> Tensor:
    """Row gather ``table[indices]``; duplicate indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table of {table.shape[0]} rows")
    shape, dtype = table.shape, table.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx.ravel(), g.reshape(-1, shape[1]))
        return (out,)

    return _result(table.data[idx], (table,), backward)


def window_gather(x: Tensor, end, width: int) -> Tensor:
    """Fixed-width windows of rows ending (exclusive) at ``end``.

    ``x`` is ``(B, N, d)``, ``end`` an integer array ``(B, L)``.  The result is
    ``(B, L, width, d)`` with ``out[b, l, w] = x[b, end[b, l] - width + w]``;
    rows that would fall before index 0 are zeros.
    """
    end = np.asarray(end, dtype=np.int64)
    B, N, d = x.shape
    if end.shape[0] != B:
        raise ShapeError(f"window_gather: batch of end {end.shape} vs x {x.shape}")
    if end.size and (end.min() < 0 or end.max() > N):
        raise IndexError(f"window end out of bounds for {N} rows")
    pad = np.zeros((B, width + N, d), dtype=x.dtype)
    pad[:, width:] = x.data
    windows = np.lib.stride_tricks.sliding_window_view(pad, width, axis=1)  # (B, N+1, d, W)
    bidx = np.arange(B)[:, None]
    out = windows[bidx, end].transpose(0, 1, 3, 2)  # (B, L, W, d)

    def backward(g):
        # sum query grads sharing a window start, then shift-add into rows
        onehot = np.zeros((B, N + 1, end.shape[1]), dtype=g.dtype)
        onehot[bidx, end, np.arange(end.shape[1])[None, :]] = 1.0
        L = end.shape[1]
        per_start = np.matmul(onehot, g.reshape(B, L, width * d)).reshape(B, N + 1, width, d)
        gpad = np.zeros((B, width + N, d), dtype=g.dtype)
        for w in range(width):
            gpad[:, w : w + N + 1] += per_start[:, :, w]
        return (gpad[:, width:],)

    return _result(np.ascontiguousarray(out), (x,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without indices private to a single operand."""
    spec = spec.replace(" ", "")
    ins, out = spec.split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s):
            raise ValueError(f"einsum: repeated index in {s!r}")
        for ch in s:
            if ch not in other and ch not in out:
                raise ValueError(f"einsum: index {ch!r} summed within one operand is unsupported")
    ad, bd = a.data, b.data
    try:
        data = np.einsum(spec, ad, bd, optimize=False)
    except ValueError as err:
        raise ShapeError(f"einsum {spec!r}: {a.shape} and {b.shape}: {err}") from err

    def backward(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, bd, optimize=False) if a.requires_grad else None
        gb = np.einsum(f"{out},{sa}->{sb}", g, ad, optimize=False) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward)


# ------------------------------------------------------------------- nn blocks


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last dimension, optionally with an additive mask.

    The mask may hold ``-inf``; every row must keep at least one finite entry.
    """
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty last dimension")
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward)


softmax_lastdim = softmax


def log_softmax(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ShapeError("log_softmax over an empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data

    def backward(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = _reduce_to(g * xhat, (d,))
        if bias.requires_grad:
            gb = _reduce_to(g, (d,))
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(xhat * gd + bias.data, (x, gain, bias), backward)


def normalize_rows(x: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """The un-parameterised layer norm, for reference checks."""
    xc = x - x.mean(axis=-1, keepdims=True)
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean (or weighted mean) of ``-log softmax(logits)[i, target_i]``.

    ``logits`` is ``(n, V)``.  ``weights`` (n,) selects supervised rows; the
    result divides by the total weight.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (n, V) logits, got {logits.shape}")
    n, V = logits.shape
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} rows but {tgt.shape[0]} targets")
    w = np.ones(n, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype).reshape(-1)
    active = w != 0
    if np.any((tgt[active] < 0) | (tgt[active] >= V)):
        raise IndexError(f"cross_entropy target out of range [0, {V})")
    total_w = w.sum()
    if total_w <= 0:
        raise ValueError("cross_entropy: no supervised rows")
    safe_t = np.where(active, tgt, 0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=-1, keepdims=True)
    logp = z - np.log(se)
    rows = np.arange(n)
    nll = -logp[rows, safe_t]
    loss = np.asarray(np.sum(w * nll) / total_w, dtype=logits.dtype)

    def backward(g):
        p = e / se
        p[rows, safe_t] -= 1.0
        return (p * (w / total_w)[:, None] * g,)

    return _result(loss, (logits,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)
