"""Dense tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor` whose ``_backward`` closure maps
the output gradient to gradients for its parents. Calling :func:`backward` on
a scalar sweeps the graph in reverse topological order and accumulates into
``.grad`` of every leaf that requires it.

Binary operations accept equal shapes or a scalar second operand only;
:func:`broadcast_to` is the single explicit way to expand a tensor.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    """Backward was requested on a graph that has already been consumed."""


class MissingGradientError(RuntimeError):
    pass


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them for differentiation."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An n-dimensional float array with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""
        self._consumed = False

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _is_scalar(b) -> bool:
    return isinstance(b, (int, float, np.floating, np.integer)) or (
        isinstance(b, Tensor) and b.ndim == 0
    )


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and _is_scalar(b):
        return _result(a.data + a.dtype.type(b), (a,), lambda g: (g,), "add")
    b = as_tensor(b)
    if b.ndim == 0 and a.ndim > 0:
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum()), "add")
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and _is_scalar(b):
        return _result(a.data - a.dtype.type(b), (a,), lambda g: (g,), "sub")
    b = as_tensor(b)
    if b.ndim == 0 and a.ndim > 0:
        return _result(a.data - b.data, (a, b), lambda g: (g, -g.sum()), "sub")
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and _is_scalar(b):
        return scale(a, b)
    b = as_tensor(b)
    ad, bd = a.data, b.data
    if b.ndim == 0 and a.ndim > 0:
        return _result(ad * bd, (a, b), lambda g: (g * bd, (g * ad).sum()), "mul")
    _check_same_shape(a, b, "mul")
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: Scalar) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "exp": exp,
    "log": log,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name; unary ops ignore ``b``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("relu", "exp", "log"):
        return fn(a)
    if b is None:
        raise ValueError(f"{op} needs a second operand")
    return fn(a, b)


# ---------------------------------------------------------------------------
# shape and reduction


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style expansion; backward sums over expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    out = np.broadcast_to(a.data, shape).copy()
    lead = len(shape) - len(src)
    summed = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1
    )

    def _bw(g):
        return (g.sum(axis=summed, keepdims=True).reshape(src) if summed else g.reshape(src),)

    return _result(out, (a,), _bw, "broadcast_to")


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"invalid axis {ax} for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError("repeated axis")
    return tuple(sorted(out))


def reduce_sum(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def _bw(g):
        return (np.broadcast_to(g.reshape(kept), src).copy(),)

    return _result(a.data.sum(axis=axes), (a,), _bw, "sum")


def reduce_mean(a, axes=None) -> Tensor:
    """Arithmetic mean over ``axes``; reduced axes are dropped."""
    a = as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    src = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))
    inv = a.dtype.type(1.0 / count)

    def _bw(g):
        return (np.broadcast_to(g.reshape(kept) * inv, src).copy(),)

    return _result(a.data.mean(axis=axes), (a,), _bw, "mean")


def logsumexp(a, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Stable log-sum-exp along one axis; entries where ``mask`` is False are excluded.

    Every slice must keep at least one unmasked entry.
    """
    a = as_tensor(a)
    x = a.data
    m = np.ones_like(x, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != x.shape:
        raise ShapeError("logsumexp: mask shape mismatch")
    if not np.all(m.any(axis=axis)):
        raise ValueError("logsumexp: a slice is fully masked")
    xm = np.where(m, x, -np.inf)
    peak = xm.max(axis=axis, keepdims=True)
    e = np.where(m, np.exp(xm - peak), 0.0).astype(x.dtype)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + peak).squeeze(axis)
    w = e / s

    def _bw(g):
        return (np.expand_dims(g, axis) * w,)

    return _result(out.astype(x.dtype), (a,), _bw, "logsumexp")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape [N, d_in] and weight [d_out, d_in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError("linear: bias shape")
        out = out + bias.data
        parents.append(bias)

    def _bw(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _result(out, parents, _bw, "linear")


def _channel_major(a: np.ndarray) -> np.ndarray:
    """[N, C, ...] -> contiguous [C, N * ...]."""
    return np.ascontiguousarray(np.swapaxes(a, 0, 1)).reshape(a.shape[1], -1)


def _batch_major(a2: np.ndarray, n: int, rest: tuple) -> np.ndarray:
    """Inverse of :func:`_channel_major` for a [C, N * prod(rest)] matrix."""
    return np.ascontiguousarray(np.swapaxes(a2.reshape((a2.shape[0], n) + rest), 0, 1))


def channel_mix(x, weight, bias=None) -> Tensor:
    """1x1 convolution over axis 1: x [N, C_in, ...] -> [N, C_out, ...]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim < 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"channel_mix: {x.shape} vs weight {weight.shape}")
    wd = weight.data
    n = x.shape[0]
    rest = x.shape[2:]
    x2 = _channel_major(x.data)
    out2 = wd @ x2
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out2 += bias.data[:, None]
        parents.append(bias)

    def _bw(g):
        g2 = _channel_major(g)
        grads = [_batch_major(wd.T @ g2, n, rest), g2 @ x2.T]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    return _result(_batch_major(out2, n, rest), parents, _bw, "channel_mix")


def conv1d_temporal(x, w, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """Temporal convolution applied independently per joint.

    x is [C_in, T, V] or [N, C_in, T, V]; w is [C_out, C_in, k].
    Output length is (T + 2 * padding - k) // stride + 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 3:
        raise ShapeError("conv1d_temporal: weight must be [C_out, C_in, k]")
    c_out, c_in, k = w.shape
    if padding is None:
        padding = (k - 1) // 2
    if k % 2 == 0 or stride not in (1, 2) or padding < 0 or padding >= k:
        raise ValueError(f"conv1d_temporal: invalid kernel/stride/padding ({k}, {stride}, {padding})")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or xd.shape[1] != c_in:
        raise ShapeError(f"conv1d_temporal: input {x.shape} vs weight {w.shape}")
    n, _, t, v = xd.shape
    t_out = (t + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise ValueError("conv1d_temporal: sequence too short for kernel")
    span = stride * (t_out - 1) + 1
    # channel-major padded input [C_in, N, T + 2p, V]
    xc = np.zeros((c_in, n, t + 2 * padding, v), dtype=xd.dtype)
    xc[:, :, padding : padding + t, :] = np.swapaxes(xd, 0, 1)
    cols = np.empty((c_in, k, n, t_out, v), dtype=xd.dtype)
    for j in range(k):
        cols[:, j] = xc[:, :, j : j + span : stride, :]
    cols2 = cols.reshape(c_in * k, -1)
    wmat = w.data.reshape(c_out, c_in * k)
    out = _batch_major(wmat @ cols2, n, (t_out, v))

    def _bw(g):
        g2 = _channel_major(g[None] if squeeze else g)
        dw = (g2 @ cols2.T).reshape(w.shape)
        dcols = (wmat.T @ g2).reshape(c_in, k, n, t_out, v)
        dxc = np.zeros_like(xc)
        for j in range(k):
            dxc[:, :, j : j + span : stride, :] += dcols[:, j]
        dx = np.ascontiguousarray(np.swapaxes(dxc[:, :, padding : padding + t, :], 0, 1))
        if squeeze:
            dx = dx[0]
        return (dx, dw)

    return _result(out[0] if squeeze else out, (x, w), _bw, "conv1d_temporal")


def graph_aggregate(x, adj) -> Tensor:
    """out[..., v] = sum_u adj[v, u] * x[..., u] over the trailing joint axis."""
    x, adj = as_tensor(x), as_tensor(adj)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ShapeError("graph_aggregate: adjacency must be square")
    if x.shape[-1] != adj.shape[0]:
        raise ShapeError(f"graph_aggregate: {x.shape[-1]} joints vs adjacency {adj.shape}")
    xd, ad = x.data, adj.data
    v = ad.shape[0]

    def _bw(g):
        da = g.reshape(-1, v).T @ xd.reshape(-1, v)
        return (g @ ad, da)

    return _result(xd @ ad.T, (x, adj), _bw, "graph_aggregate")


class BatchNormState:
    """Running statistics for :func:`batch_norm`."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=None):
        dtype = dtype or _DEFAULT_DTYPE
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization over every axis except 1."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    n, c = xd.shape[:2]
    x3 = xd.reshape(n, c, -1)
    count = x3.shape[0] * x3.shape[2]
    gd = gamma.data
    dt = xd.dtype.type
    if training:
        if n < 2:
            raise ValueError("batch_norm: training mode needs a batch of at least 2")
        mean = np.einsum("ncl->c", x3) / dt(count)
        centered = x3 - mean[:, None]
        var = np.einsum("ncl,ncl->c", centered, centered) / dt(count)
        m = state.momentum
        unbiased = var * (count / max(count - 1, 1))
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
    else:
        mean, var = state.running_mean.astype(dt), state.running_var.astype(dt)
        centered = x3 - mean[:, None]
    inv_std = (1.0 / np.sqrt(var + dt(state.eps))).astype(dt)
    xhat = centered
    xhat *= inv_std[:, None]
    out = xhat * gd[:, None]
    out += beta.data[:, None]

    def _bw(g):
        g3 = g.reshape(n, c, -1)
        dgamma = np.einsum("ncl,ncl->c", g3, xhat)
        dbeta = np.einsum("ncl->c", g3)
        if not training:
            return ((g3 * (gd * inv_std)[:, None]).reshape(xd.shape), dgamma, dbeta)
        # dx = gamma * inv_std / count * (count * g - sum(g) - xhat * sum(g * xhat))
        k = (gd * inv_std / dt(count)).astype(dt)
        dx = g3 * (k * dt(count))[:, None]
        dx -= (k * dbeta)[:, None]
        dx -= xhat * (k * dgamma)[:, None]
        return (dx.reshape(xd.shape), dgamma, dbeta)

    return _result(out.reshape(xd.shape), (x, gamma, beta), _bw, "batch_norm")


# ---------------------------------------------------------------------------
# losses and similarities


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Batch-mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy: expects logits [N, K] and labels [N]")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError("softmax_cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, labels]).mean()
    p = np.exp(z - lse[:, None])

    def _bw(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), _bw, "softmax_cross_entropy")


def _unit_rows(x: np.ndarray):
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    return x / safe, norm, safe


def cosine_rows(u, v) -> Tensor:
    """Row-wise cosine similarity along the last axis.

    A zero-norm row on either side yields 0 with zero gradient.
    """
    u, v = as_tensor(u), as_tensor(v)
    _check_same_shape(u, v, "cosine")
    uh, un, us = _unit_rows(u.data)
    vh, vn, vs = _unit_rows(v.data)
    live = ((un > 0) & (vn > 0)).squeeze(-1)
    cos = np.where(live, (uh * vh).sum(axis=-1), 0.0).astype(u.dtype)
    cos = np.clip(cos, -1.0, 1.0)

    def _bw(g):
        gl = np.where(live, g, 0.0)[..., None]
        c = cos[..., None]
        du = gl * (vh - c * uh) / us
        dv = gl * (uh - c * vh) / vs
        return (du, dv)

    return _result(cos, (u, v), _bw, "cosine")


def cosine_distance(u, v) -> Tensor:
    """u . v / (|u| |v|) for two vectors; 0 when either has zero norm."""
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1:
        raise ShapeError("cosine_distance expects 1-d vectors")
    return cosine_rows(u, v)


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine similarity between rows of a [N, d] and rows of b [M, d]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix: {a.shape} vs {b.shape}")
    ah, an, as_ = _unit_rows(a.data)
    bh, bn, bs = _unit_rows(b.data)
    live = (an > 0) & (bn > 0).T
    s = np.where(live, ah @ bh.T, 0.0).astype(a.dtype)
    s = np.clip(s, -1.0, 1.0)

    def _bw(g):
        gl = np.where(live, g, 0.0)
        dah = gl @ bh
        da = (dah - (dah * ah).sum(axis=1, keepdims=True) * ah) / as_
        dbh = gl.T @ ah
        db = (dbh - (dbh * bh).sum(axis=1, keepdims=True) * bh) / bs
        return (da, db)

    return _result(s, (a, b), _bw, "cosine_matrix")


# ---------------------------------------------------------------------------
# backward sweep


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("graph already consumed by a previous backward; recompute the forward pass")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if node._consumed:
            raise TapeError("graph contains nodes consumed by a previous backward")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True


# ---------------------------------------------------------------------------
# optimization


class SGD:
    """SGD with momentum; weight decay is folded into the gradient.

    v <- m * v + (g + wd * p);  p <- p - lr * v
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise MissingGradientError(f"parameter {p.name or i} has no gradient")
        dt = self.params[0].dtype.type if self.params else np.float64
        lr, m, wd = dt(self.lr), dt(self.momentum), dt(self.weight_decay)
        for p, v in zip(self.params, self.buffers):
            v *= m
            v += p.grad + wd * p.data
            p.data -= lr * v
            p.grad = None


def sgd_step(params: Sequence[Tensor], state: SGD) -> None:
    """Functional alias for ``state.step()``; ``params`` must match the registered set."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("sgd_step: parameter list differs from optimizer registration")
    state.step()


def finite_difference_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |a - n| / max(|a|, |n|, 1e-8). A non-finite
    evaluation of ``f`` returns ``inf``. With ``max_coords`` set, each
    parameter contributes at most that many seeded random coordinates.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    try:
        loss = f(params)
        backward(loss)
    except NonFiniteError:
        return math.inf
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        with no_grad():
            return float(f(params).data)

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        af = a.reshape(-1)
        coords = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            try:
                flat[i] = orig + eps
                fp = value()
                flat[i] = orig - eps
                fm = value()
            except NonFiniteError:
                return math.inf
            finally:
                flat[i] = orig
            num = (fp - fm) / (2 * eps)
            if not math.isfinite(num):
                return math.inf
            err = abs(af[i] - num) / max(abs(af[i]), abs(num), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
