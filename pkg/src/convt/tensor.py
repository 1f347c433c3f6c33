"""Dense tensors with reverse-mode automatic differentiation.

Arrays are numpy-backed, float32 or float64. Every operation validates that
its output is finite and, when gradients are enabled, records its parents and
a backward rule on the result, so a scalar loss can be differentiated with a
single reverse sweep over the recorded graph. Graphs are rebuilt on every
forward pass; nothing is cached between calls.

Tensors are treated as immutable once created, except for explicit in-place
parameter updates performed by an optimizer between forward passes.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "layer_norm",
    "softmax",
    "log_softmax",
    "gelu",
    "relu",
    "reshape",
    "transpose",
    "tensor_sum",
    "tensor_mean",
    "gather_rows",
    "take_per_row",
    "backward",
    "finite_diff_check",
    "FiniteDiffReport",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf, or was fed non-finite data."""


_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Grad recording is thread-local so concurrent inference (e.g. parallel
# evaluation repeats) cannot re-enable recording under another thread's feet.
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """An n-dimensional array with an optional gradient slot.

    ``data`` is a numpy array in row-major order. ``grad`` is populated by
    :func:`backward` for tensors that ``requires_grad``. Non-finite values
    are rejected at construction, which makes every operation fail loudly
    instead of propagating NaN/Inf.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor data contains NaN or Inf (op output shape {arr.shape})")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # arithmetic sugar; scalars and arrays are wrapped as constant tensors
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value)
    if like is not None and arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(like.data.dtype)
    elif like is not None and np.isscalar(value):
        arr = arr.astype(like.data.dtype)
    return Tensor(arr)


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _record(out, (a, b), bw, "mul")


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    t = _as_tensor(t)
    orig = t.data.shape
    out = t.data.reshape(shape)

    def bw(g):
        return (g.reshape(orig),)

    return _record(out, (t,), bw, "reshape")


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    t = _as_tensor(t)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = t.data.transpose(axes)

    def bw(g):
        return (g.transpose(inverse),)

    return _record(out, (t,), bw, "transpose")


def tensor_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, t.data.shape).astype(t.dtype, copy=True),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, t.data.shape).astype(t.dtype, copy=True),)

    return _record(out, (t,), bw, "sum")


def tensor_mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    out = t.data.mean(axis=axis, keepdims=keepdims)
    count = t.data.size if axis is None else t.data.shape[axis]

    def bw(g):
        scaled = g / count
        if axis is None:
            return (np.broadcast_to(scaled, t.data.shape).astype(t.dtype, copy=True),)
        if not keepdims:
            scaled = np.expand_dims(scaled, axis)
        return (np.broadcast_to(scaled, t.data.shape).astype(t.dtype, copy=True),)

    return _record(out, (t,), bw, "mean")


def gather_rows(t: Tensor, indices) -> Tensor:
    """Select rows of a 2D tensor by index, with repeats allowed."""
    t = _as_tensor(t)
    idx = np.asarray(indices, dtype=np.intp)
    out = t.data[idx]

    def bw(g):
        acc = np.zeros_like(t.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _record(out, (t,), bw, "gather_rows")


def take_per_row(t: Tensor, indices) -> Tensor:
    """For a [B, C] tensor, pick one column per row: out[i] = t[i, idx[i]]."""
    t = _as_tensor(t)
    if t.ndim != 2:
        raise ShapeError(f"take_per_row expects a 2D tensor, got shape {t.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(t.shape[0])
    out = t.data[rows, idx]

    def bw(g):
        acc = np.zeros_like(t.data)
        acc[rows, idx] = g
        return (acc,)

    return _record(out, (t,), bw, "take_per_row")


def relu(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    out = np.maximum(t.data, 0)

    def bw(g):
        return (g * (t.data > 0),)

    return _record(out, (t,), bw, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(t: Tensor) -> Tensor:
    """Smooth Gaussian-error-linear ramp (tanh form)."""
    t = _as_tensor(t)
    x = t.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        sech2 = 1.0 - th * th
        local = 0.5 * (1.0 + th) + x * sech2 * (0.5 * _GELU_C) * (1.0 + (3.0 * _GELU_A) * x2)
        return (g * local,)

    return _record(out, (t,), bw, "gelu")


# ---------------------------------------------------------------------------
# matmul / conv / normalization


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as err:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} x {b.shape}") from err

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record(out, (a, b), bw, "matmul")


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B,C,H,W] input with an [F,C,KH,KW] kernel.

    Output height is floor((H + 2*padding - KH)/stride) + 1, and likewise for
    width. Gradients are exact for both input and kernel.
    """
    x = _as_tensor(x)
    kernel = _as_tensor(kernel, like=x)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be >= 0, got {padding}")
    batch, chans, height, width = x.shape
    filters, kchans, kh, kw = kernel.shape
    if kchans != chans:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    hp, wp = height + 2 * padding, width + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp} "
            f"(input {x.shape}, padding {padding})"
        )
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # gather kernel-sized patches: one strided slice per kernel offset
    cols = np.empty((batch, chans, kh, kw, h_out, w_out), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
    cols2 = cols.reshape(batch, chans * kh * kw, h_out * w_out)
    kmat = kernel.data.reshape(filters, chans * kh * kw)
    out = np.matmul(kmat, cols2).reshape(batch, filters, h_out, w_out)

    def bw(g):
        g2 = g.reshape(batch, filters, h_out * w_out)
        gk = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gcols = np.matmul(kmat.T, g2).reshape(batch, chans, kh, kw, h_out, w_out)
        gxp = np.zeros((batch, chans, hp, wp), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding : padding + height, padding : padding + width] if padding else gxp
        return gx, gk

    return _record(out, (x, kernel), bw, "conv2d")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale/shift by gamma and beta."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, like=x)
    beta = _as_tensor(beta, like=x)
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    dim = x.shape[-1] if x.ndim else 0
    if dim == 0:
        raise ShapeError(f"layer_norm needs a nonempty last axis, got shape {x.shape}")
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ShapeError(
            f"layer_norm gamma/beta must have shape ({dim},), got {gamma.shape} and {beta.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        ggamma = (g * xhat).reshape(-1, dim).sum(axis=0)
        gbeta = g.reshape(-1, dim).sum(axis=0)
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma.astype(gamma.dtype, copy=False), gbeta.astype(beta.dtype, copy=False)

    return _record(out, (x, gamma, beta), bw, "layer_norm")


def softmax(x, axis: int = -1) -> Tensor:
    """Normalized exponentials along ``axis``, computed with max subtraction."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# reverse sweep


@dataclass
class Graph:
    """Topologically ordered record of every tensor reachable from an output.

    ``nodes`` lists parents before the operations that consume them, so a
    reverse iteration visits each recorded operation exactly once.
    """

    nodes: list[Tensor]

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
        return cls(order)


def backward(loss: Tensor, params: Iterable[Tensor] | Mapping[str, Tensor] | None = None):
    """Reverse-mode sweep from a scalar loss.

    Returns a dict mapping each requires_grad leaf tensor to its gradient
    array (also stored on ``tensor.grad``). When ``params`` is given, every
    listed parameter gets an entry, with zeros for parameters the loss does
    not depend on.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        if g is None or node._backward_fn is None:
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    result: dict[Tensor, np.ndarray] = {}
    for node in graph.nodes:
        if node.requires_grad and node._backward_fn is None:
            node.grad = grads.get(id(node), np.zeros_like(node.data))
            result[node] = node.grad
    if params is not None:
        values = params.values() if isinstance(params, Mapping) else params
        for p in values:
            if p not in result:
                p.grad = np.zeros_like(p.data)
                result[p] = p.grad
    return result


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst_param: str
    worst_index: int
    num_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    num_samples: int = 200,
    rng: np.random.Generator | None = None,
) -> FiniteDiffReport:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call. Parameters must be float64; the check is meaningless in single
    precision. Coordinates are sampled uniformly across all parameters.
    """
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    params = dict(params)
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"finite_diff_check requires float64 parameters ({name} is {p.dtype})")

    loss = f()
    backward(loss, params)

    coords = [(name, i) for name, p in params.items() for i in range(p.size)]
    if len(coords) > num_samples:
        rng = rng if rng is not None else np.random.default_rng(0)
        picks = rng.choice(len(coords), size=num_samples, replace=False)
        coords = [coords[int(i)] for i in picks]

    worst = (0.0, "", -1)
    for name, i in coords:
        p = params[name]
        orig = p.data.flat[i]
        p.data.flat[i] = orig + step
        with no_grad():
            f_plus = float(f())
        p.data.flat[i] = orig - step
        with no_grad():
            f_minus = float(f())
        p.data.flat[i] = orig
        fd = (f_plus - f_minus) / (2.0 * step)
        an = float(p.grad.flat[i])
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
        if rel > worst[0]:
            worst = (rel, name, i)

    return FiniteDiffReport(
        max_rel_error=worst[0],
        worst_param=worst[1],
        worst_index=worst[2],
        num_checked=len(coords),
        tol=tol,
    )
