"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Each op produces a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to per-parent gradients. Graphs are
only recorded while gradient mode is on and at least one input requires a
gradient, so sampling under :func:`no_grad` costs no bookkeeping.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, NumericError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")


class Tensor:
    """A float array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = _float_array(data, dtype)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
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

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def astype(self, dtype) -> Tensor:
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict[int, np.ndarray]:
        return backprop(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, tuple(reversed(range(self.ndim))))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result(out: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        return (g * s,)

    return _result(x.data * s, (x,), backward, "scale")


def silu(x: Tensor) -> Tensor:
    sig = expit(x.data)

    def backward(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _result(x.data * sig, (x,), backward, "silu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward, "softmax")


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward, "mean")


def mean_square(x: Tensor) -> Tensor:
    n = x.size

    def backward(g):
        return (x.data * (2.0 * g / n),)

    return _result(np.asarray(np.mean(x.data * x.data), dtype=x.dtype), (x,), backward, "mean_square")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _result(x.data.transpose(axes), (x,), backward, "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _result(np.array(out), (x,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, m = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding: token id out of range")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result(table.data[ids], (table,), backward, "embedding")


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention, softmax(q k^T / sqrt(d)) v, batched on axis 0."""
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("attention expects [B, N, d] operands")
    if q.shape[0] != k.shape[0] or k.shape[:2] != v.shape[:2] or q.shape[2] != k.shape[2]:
        raise ShapeError(f"attention: incompatible shapes {q.shape}, {k.shape}, {v.shape}")
    s = 1.0 / math.sqrt(q.shape[-1])
    scores = np.matmul(q.data, np.swapaxes(k.data, 1, 2)) * s
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.matmul(p, v.data)

    def backward(g):
        gv = np.matmul(np.swapaxes(p, 1, 2), g)
        gp = np.matmul(g, np.swapaxes(v.data, 1, 2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gs *= s
        gq = np.matmul(gs, k.data) if q.requires_grad else None
        gk = np.matmul(np.swapaxes(gs, 1, 2), q.data) if k.requires_grad else None
        return gq, gk, gv

    return _result(out, (q, k, v), backward, "attention")


# ---------------------------------------------------------------- image ops


def conv2d_nhwc(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of channels-last input with an (out, in, kh, kw) kernel via im2col."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    bsz, h, wd, cin = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError("conv2d: kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    he = stride * (ho - 1) + 1
    we = stride * (wo - 1) + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.reshape(-1, cin)
    else:
        cols6 = np.empty((bsz, ho, wo, kh, kw, cin), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                cols6[:, :, :, i, j, :] = xp[:, i:i + he:stride, j:j + we:stride, :]
        cols = cols6.reshape(bsz * ho * wo, kh * kw * cin)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(bsz, ho, wo, cout)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(bsz, ho, wo, kh, kw, cin)
            if kh == 1 and kw == 1 and stride == 1:
                dxp = dcols.reshape(xp.shape)
            else:
                dxp = np.zeros(xp.shape, dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + he:stride, j:j + we:stride, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, pad:pad + h, pad:pad + wd, :] if pad else dxp
        return (gx, gw) if b is None else (gx, gw, gb)

    return _result(out, parents, backward, "conv2d")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """NCHW convolution; routes through the channels-last kernel."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input, got {x.shape}")
    y = conv2d_nhwc(transpose(x, (0, 2, 3, 1)), w, b, stride=stride, pad=pad)
    return transpose(y, (0, 3, 1, 2))


def upsample_nearest(x: Tensor, factor: int = 2, channels_last: bool = False) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("upsample_nearest expects 4-D input")
    f = int(factor)
    ha, wa = (1, 2) if channels_last else (2, 3)
    out = x.data.repeat(f, axis=ha).repeat(f, axis=wa)
    shape = x.shape

    def backward(g):
        if channels_last:
            b, h, w, c = shape
            return (g.reshape(b, h, f, w, f, c).sum(axis=(2, 4)),)
        b, c, h, w = shape
        return (g.reshape(b, c, h, f, w, f).sum(axis=(3, 5)),)

    return _result(out, (x,), backward, "upsample_nearest")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5,
               channels_last: bool = False) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("group_norm expects 4-D input")
    c = x.shape[3] if channels_last else x.shape[1]
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("group_norm: affine parameters must have shape (C,)")
    if channels_last:
        return _group_norm_nhwc(x, gamma, beta, groups, eps)
    bsz = x.shape[0]
    xg = x.data.reshape(bsz, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    xhat4 = xhat.reshape(x.shape)
    bshape = (1, c, 1, 1)
    out = xhat4 * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat4).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxh = (g * gamma.data.reshape(bshape)).reshape(xg.shape)
            gx = rstd * (gxh - gxh.mean(axis=-1, keepdims=True)
                         - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward, "group_norm")


def _group_norm_nhwc(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float) -> Tensor:
    # reductions run over the contiguous spatial axis, then fold channels into groups
    bsz, h, w, c = x.shape
    cg = c // groups
    n = h * w * cg
    xs = x.data.reshape(bsz, h * w, c)

    def group_mean(per_channel_sum):
        gm = per_channel_sum.reshape(bsz, groups, cg).sum(axis=-1) / n
        return np.repeat(gm, cg, axis=1)[:, None, :]

    mu = group_mean(xs.sum(axis=1))
    xc = xs - mu
    rstd = 1.0 / np.sqrt(group_mean((xc * xc).sum(axis=1)) + eps)
    xhat = xc * rstd
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        gs = g.reshape(bsz, h * w, c)
        ggamma = (gs * xhat).sum(axis=(0, 1)) if gamma.requires_grad else None
        gbeta = gs.sum(axis=(0, 1)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxh = gs * gamma.data
            gx = rstd * (gxh - group_mean(gxh.sum(axis=1)) - xhat * group_mean((gxh * xhat).sum(axis=1)))
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward, "group_norm")


# ---------------------------------------------------------------- dispatch

PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "conv2d": conv2d,
    "conv2d_nhwc": conv2d_nhwc,
    "upsample_nearest": upsample_nearest,
    "group_norm": group_norm,
    "silu": silu,
    "softmax": softmax,
    "attention": attention,
    "mean_square": mean_square,
    "mean": mean,
    "sum": sum_all,
    "concat": concat,
    "reshape": reshape,
    "transpose": transpose,
    "embedding": embedding,
}


def eval_primitive(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Evaluate a named primitive; ``concat`` takes its whole input list as one operand."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- backprop


@dataclass(frozen=True)
class GraphNode:
    op: str
    input_ids: tuple[int, ...]
    output_id: int


class ComputationGraph:
    """Topologically ordered view of everything reachable from ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.order = _topo_order(output)

    @property
    def nodes(self) -> list[GraphNode]:
        return [GraphNode(t.op, tuple(id(p) for p in t._parents), id(t))
                for t in self.order if not t.is_leaf]

    @property
    def leaves(self) -> list[Tensor]:
        return [t for t in self.order if t.is_leaf and t.requires_grad]


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backprop(target: Tensor | ComputationGraph,
             params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar output.

    Returns ``{id(leaf): grad}`` for every grad-requiring leaf reached, and
    for every tensor in ``params`` (zeros when it did not participate). The
    same arrays are stored on ``leaf.grad``.
    """
    graph = target if isinstance(target, ComputationGraph) else ComputationGraph(target)
    out = graph.output
    if out.size != 1:
        raise ContractError(f"backprop needs a scalar output, got shape {out.shape}")
    pending: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
    result: dict[int, np.ndarray] = {}
    for node in reversed(graph.order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g
                result[id(node)] = g
            continue
        for parent, gp in zip(node._parents, node._backward(g)):
            if gp is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = pending.get(key)
            pending[key] = gp if prev is None else prev + gp
    if params is not None:
        for p in params:
            if id(p) not in result:
                p.grad = np.zeros_like(p.data)
                result[id(p)] = p.grad
    return result


# ---------------------------------------------------------------- verification


def finite_diff_check(builder: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
                      max_per_input: int | None = None, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    ``builder`` closes over ``inputs`` and returns a scalar tensor; each
    input element is perturbed in place. ``max_per_input`` limits the check
    to a seeded random subset of coordinates per input. ``floor`` bounds the
    denominator so structurally zero gradients (where the difference quotient
    is pure rounding noise) are not read as large relative errors.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("finite_diff_check requires 64-bit tensors")
    first = builder()
    second = builder()
    if not np.array_equal(first.data, second.data):
        raise ContractError("builder is not deterministic")
    for t in inputs:
        t.grad = None
    grads = backprop(first, params=inputs)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t in inputs:
            flat = t.data.reshape(-1)
            analytic = grads[id(t)].reshape(-1)
            idx = np.arange(flat.size)
            if max_per_input is not None and flat.size > max_per_input:
                idx = np.sort(rng.choice(flat.size, size=max_per_input, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = builder().item()
                flat[i] = orig - eps
                fm = builder().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                a = float(analytic[i])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: dict[int, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update of ``params`` in place; returns ``state``."""
    for p in params:
        if id(p) not in grads:
            raise ContractError(f"missing gradient for parameter {p.name or id(p)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        g = grads[id(p)]
        key = id(p)
        m = state.m.get(key)
        v = state.v.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[key] = m
        state.v[key] = v
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return state


class Adam:
    """Thin stateful wrapper so trainers can hold one optimizer per phase."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads: dict[int, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state)
