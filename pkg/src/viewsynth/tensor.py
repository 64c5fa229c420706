"""Dense N-d float tensors with reverse-mode automatic differentiation.

Small enough to audit: every primitive saves exactly the arrays its backward
rule needs and links the output to its parents. float32 is the working
precision for training; build tensors with dtype=np.float64 for gradient
verification at tight tolerances.

Broadcasting follows trailing-dimension alignment only (numpy semantics):
shapes are right-aligned and each pair of extents must match or be 1.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


def _as_array(data, dtype=None):
    if dtype is None:
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
    else:
        arr = np.asarray(data, dtype=dtype)
    return arr


class Tensor:
    """Immutable dense array plus the graph edge used for backprop.

    `grad` is populated (same shape as `data`) after backward() reaches this
    tensor; constants (requires_grad=False) keep grad=None, i.e. zero.
    """

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        """Reverse-replay the tape reachable from this tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        tape = Tape(self)
        acc = {self._id: grad}
        for node in reversed(tape.nodes):
            g = acc.pop(node._id, None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not (parent.requires_grad or parent._backward):
                    continue
                if parent._id in acc:
                    acc[parent._id] = acc[parent._id] + pg
                else:
                    acc[parent._id] = pg

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of the primitives reachable from a root tensor.

    Nodes are sorted by creation id, which is a topological order: an op's
    output is always created after its inputs. Backward visits each node
    exactly once, in reverse.
    """

    def __init__(self, root: Tensor):
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t._id in seen:
                continue
            seen.add(t._id)
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._id)
        self.nodes = nodes


def _tracked(*tensors):
    return any(t.requires_grad or t._backward is not None for t in tensors)


def _result(data, parents, backward):
    out = Tensor(data)
    if _tracked(*parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of trailing-aligned broadcast)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt requires nonnegative input")
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / np.maximum(out, 1e-30),))


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return _result(a.data * sig, (a,),
                   lambda g: (g * (sig * (1.0 + a.data * (1.0 - sig))),))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale, "sqrt": sqrt, "silu": silu}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; `b` is the second operand or the scalar for scale."""
    fn = _ELEMENTWISE.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fn(a) if b is None else fn(a, b)


# ---------------------------------------------------------------------------
# matmul / conv / attention / lookup


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def _im2col(xp):
    # xp: (N, C, H+2, W+2) padded; returns (N*H*W, C*9), columns ordered
    # (channel, di, dj) to match kernel.reshape(O, C*9)
    n, c = xp.shape[:2]
    h, w = xp.shape[2] - 2, xp.shape[3] - 2
    cols = np.empty((n, h, w, c, 9), dtype=xp.dtype)
    idx = 0
    for di in range(3):
        for dj in range(3):
            cols[..., idx] = xp[:, :, di:di + h, dj:dj + w].transpose(0, 2, 3, 1)
            idx += 1
    return cols.reshape(n * h * w, c * 9)


def _conv2d_raw(x, k, cols=None):
    # x: (N,C,H,W), k: (O,C,3,3) -> (N,O,H,W); same padding
    n, c, h, w = x.shape
    o = k.shape[0]
    if cols is None:
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = _im2col(xp)
    out = cols @ k.reshape(o, c * 9).T
    return out.reshape(n, h, w, o).transpose(0, 3, 1, 2), cols


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 same-padding convolution. x: (C,H,W) or (N,C,H,W), k: (O,C,3,3)."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.data.ndim != 4 or k.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects (N,C,H,W) input and (O,C,3,3) kernel, got {tuple(x.shape)} and {tuple(k.shape)}")
    if xd.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {xd.shape[1]} vs kernel {k.shape[1]}")
    n, c, h, w = xd.shape
    o = k.shape[0]
    tracked = _tracked(x, k) or (b is not None and _tracked(b))
    out, cols = _conv2d_raw(xd, k.data)
    if b is not None:
        if b.shape != (o,):
            raise ShapeError(f"conv2d bias must be ({o},), got {tuple(b.shape)}")
        out = out + b.data.reshape(1, o, 1, 1)
    if not tracked:
        return Tensor(out[0] if squeeze else out)

    def backward(g, cols=cols):
        gd = g[None] if squeeze else g
        g_cols = np.ascontiguousarray(gd.transpose(0, 2, 3, 1)).reshape(n * h * w, o)
        dk = (g_cols.T @ cols).reshape(o, c, 3, 3)
        k_flip = np.ascontiguousarray(k.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = _conv2d_raw(gd, k_flip)
        if squeeze:
            dx = dx[0]
        if b is not None:
            return dx, dk, gd.sum(axis=(0, 2, 3))
        return dx, dk

    parents = (x, k) if b is None else (x, k, b)
    return _result(out[0] if squeeze else out, parents, backward)


def conv_kernel(out_ch: int, in_ch: int, rng=None, zero_init=False, dtype=np.float32):
    """Build a (kernel, bias) parameter pair for conv2d.

    zero_init produces exactly-zero weights and bias, the contract used by
    the control-branch fusion layers.
    """
    if zero_init:
        k = np.zeros((out_ch, in_ch, 3, 3), dtype=dtype)
    else:
        std = math.sqrt(2.0 / (in_ch * 9))
        k = (rng.standard_normal((out_ch, in_ch, 3, 3)) * std).astype(dtype)
    b = np.zeros(out_ch, dtype=dtype)
    return parameter(k), parameter(b)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(D)) v over the last two axes; batch dims lead.

    q: (..., Lq, D); k, v: (..., Lk, D) with identical batch prefix.
    """
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention shapes incompatible: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    d = q.shape[-1]
    inv = 1.0 / math.sqrt(d)
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * inv
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.matmul(p, v.data)

    def backward(g):
        dv = np.matmul(np.swapaxes(p, -1, -2), g)
        dp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = np.matmul(ds, k.data) * inv
        dk = np.matmul(np.swapaxes(ds, -1, -2), q.data) * inv
        return dq, dk, dv

    return _result(out, (q, k, v), backward)


def take_row(table: Tensor, index: int) -> Tensor:
    """Row lookup into a 2-d table (e.g. timestep embeddings)."""
    index = int(index)

    def backward(g):
        dt = np.zeros_like(table.data)
        dt[index] = g
        return (dt,)

    return _result(table.data[index], (table,), backward)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def sum_all(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,),
                   lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def mean_axes(a: Tensor, axes) -> Tensor:
    axes = tuple(sorted(ax % a.data.ndim for ax in axes))
    n = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes)

    def backward(g):
        ge = np.expand_dims(g, axes)
        return (np.broadcast_to(ge, a.shape).astype(a.data.dtype) / n,)

    return _result(out, (a,), backward)


def avg_pool2(a: Tensor) -> Tensor:
    """2x2 average pooling; spatial extents must be even. a: (N,C,H,W)."""
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial extents, got {tuple(a.shape)}")
    out = a.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _result(out, (a,), backward)


def upsample2(a: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling. a: (N,C,H,W)."""
    n, c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# optimizer


def adam_init(params: dict) -> dict:
    return {
        "m": {k: np.zeros_like(v.data) for k, v in params.items()},
        "v": {k: np.zeros_like(v.data) for k, v in params.items()},
        "t": 0,
    }


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction. Pure: returns new params/state."""
    t = state["t"] + 1
    new_params, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for {key!r}")
        m = beta1 * state["m"][key] + (1.0 - beta1) * g
        v = beta2 * state["v"][key] + (1.0 - beta2) * g * g
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[key] = parameter(p.data - step)
        new_m[key] = m
        new_v[key] = v
    return new_params, {"m": new_m, "v": new_v, "t": t}


# ---------------------------------------------------------------------------
# verification helpers


def numeric_gradient(fn, tensors, h=1e-4):
    """Central finite differences of a scalar-valued fn over the given tensors.

    Use float64 tensors for tight tolerances. fn is re-evaluated with
    perturbed copies; the returned list aligns with `tensors`.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        it = np.nditer(t.data, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            orig = t.data[ix]
            t.data[ix] = orig + h
            fp = float(fn(*tensors).data)
            t.data[ix] = orig - h
            fm = float(fn(*tensors).data)
            t.data[ix] = orig
            g[ix] = (fp - fm) / (2 * h)
            it.iternext()
        grads.append(g)
    return grads
