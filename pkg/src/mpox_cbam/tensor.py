"""Float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves onto the innermost active :class:`Graph`; outside
of a ``with Graph():`` block nothing is recorded, which is what inference and
finite-difference evaluation want.

Every op accepts an optional leading batch axis: a feature map is either
``C x H x W`` or ``N x C x H x W`` and the channel axis is always ``-3``.
"""
from __future__ import annotations

import contextvars
import functools
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, InvalidConfig, NumericalError, ShapeMismatch

_ACTIVE: contextvars.ContextVar[tuple] = contextvars.ContextVar("active_graphs", default=())
_MEMO: contextvars.ContextVar["memoize | None"] = contextvars.ContextVar("memo", default=None)

_SIGMOID_LO = np.finfo(np.float64).tiny
_SIGMOID_HI = 1.0 - np.finfo(np.float64).epsneg


class Tensor:
    """Immutable dense float64 array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ShapeMismatch(f"tensors have rank 0..4, got shape {arr.shape}")
        if 0 in arr.shape:
            raise ShapeMismatch(f"every extent must be >= 1, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # no copy; caller guarantees arr is float64 and not mutated behind our back
        t = cls.__new__(cls)
        view = arr.view()
        view.flags.writeable = False
        t.data = view
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __radd__ = __add__
    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape))


@dataclass(frozen=True)
class Node:
    """One recorded operation: ``rule(grad_out)`` yields a gradient per input."""

    op: str
    inputs: tuple
    output: Tensor
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Append-only tape of recorded operations.

    Use as a context manager; ops executed inside the block are recorded here.
    Nodes are appended in execution order, so the tape is topologically sorted.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Graph":
        self._token = _ACTIVE.set(_ACTIVE.get() + (self,))
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)


def active_graph() -> Graph | None:
    stack = _ACTIVE.get()
    return stack[-1] if stack else None


def record(op: str, out: np.ndarray, inputs: Iterable[Tensor], rule) -> Tensor:
    """Wrap ``out`` as a Tensor and record ``rule`` on the active graph.

    Raises :class:`NumericalError` if ``out`` holds a NaN or infinity.
    """
    if not np.isfinite(out).all():
        raise NumericalError(f"{op}: non-finite value in output")
    inputs = tuple(inputs)
    graph = active_graph()
    track = graph is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(np.asarray(out, dtype=np.float64), requires_grad=track)
    if track:
        graph.nodes.append(Node(op, inputs, result, rule))
    return result


class memoize:
    """Reuse op results for repeated calls on the very same input tensors.

    Only active while no graph is recording. Because tensors are immutable,
    an op applied to identical input objects yields an identical result; this
    turns repeated evaluation of a function whose inputs change one at a time
    (finite differences) into recomputation of the affected suffix only.
    """

    def __init__(self, size: int = 1024):
        self.size = size
        self._cache: OrderedDict = OrderedDict()
        self._token = None

    def __enter__(self) -> "memoize":
        self._token = _MEMO.set(self)
        return self

    def __exit__(self, *exc):
        _MEMO.reset(self._token)
        self._cache.clear()
        return False

    def lookup(self, key):
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit[0]
        return None

    def store(self, key, value, args):
        # args keep the keyed tensors alive so their ids cannot be reused
        self._cache[key] = (value, args)
        if len(self._cache) > self.size:
            self._cache.popitem(last=False)


def _memo_key(v):
    t = type(v)
    if t is Tensor:
        return id(v)
    if t is list or t is tuple:
        return tuple(map(id, v))
    return v


def _memoizable(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        memo = _MEMO.get()
        if memo is None or _ACTIVE.get():
            return fn(*args, **kwargs)
        key = (fn, *map(_memo_key, args))
        if kwargs:
            key += tuple(kwargs.items())
        out = memo.lookup(key)
        if out is None:
            out = fn(*args, **kwargs)
            memo.store(key, out, args)
        return out

    return wrapper


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _broadcast_kind(a_shape, b_shape) -> str:
    if a_shape == b_shape:
        return "equal"
    if len(a_shape) == len(b_shape) >= 3:
        if b_shape[-2:] == (1, 1) and b_shape[:-2] == a_shape[:-2]:
            return "channel"
        if b_shape[-3] == 1 and b_shape[-2:] == a_shape[-2:] and b_shape[:-3] == a_shape[:-3]:
            return "spatial"
    raise ShapeMismatch(f"cannot combine shapes {a_shape} and {b_shape}")


def _reduce_to(g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "channel":
        return g.sum(axis=(-2, -1), keepdims=True)
    if kind == "spatial":
        return g.sum(axis=-3, keepdims=True)
    return g


@_memoizable
def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Add or multiply ``a`` and ``b``.

    ``b`` must match ``a`` exactly, or be a ``C x 1 x 1`` channel gate or a
    ``1 x H x W`` spatial gate for a ``C x H x W`` ``a`` (with an optional
    shared leading batch axis). The output always has ``a``'s shape.
    """
    kind = _broadcast_kind(a.shape, b.shape)
    x, y = a.data, b.data
    if op == "add":
        out = x + y
        rule = lambda g: (g, _reduce_to(g, kind))
    elif op == "mul":
        out = x * y
        rule = lambda g: (g * y, _reduce_to(g * x, kind))
    else:
        raise InvalidConfig(f"unknown elementwise op {op!r}")
    return record(op, out, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


@_memoizable
def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return record("sum", np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape),))


@_memoizable
def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return record("mean", np.mean(x.data), (x,), lambda g: (np.broadcast_to(g / n, shape),))


# ---------------------------------------------------------------------------
# activations


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep the open interval even where float64 saturates
    return np.clip(s, _SIGMOID_LO, _SIGMOID_HI)


def _relu_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (x > 0)


@_memoizable
def relu(x: Tensor) -> Tensor:
    v = x.data
    return record("relu", np.maximum(v, 0.0), (x,), lambda g: (_relu_grad(v, g),))


@_memoizable
def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise InvalidConfig(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# pooling and reshaping


def _require_map(x: Tensor, op: str):
    if x.ndim not in (3, 4):
        raise ShapeMismatch(f"{op} expects C x H x W or N x C x H x W, got {x.shape}")


def _shifted_mean(v: np.ndarray, axis) -> np.ndarray:
    # subtracting a reference element makes the mean of a constant exact
    ref = v[..., :1, :1] if axis == (-2, -1) else v[..., :1, :, :]
    return ref + np.mean(v - ref, axis=axis, keepdims=True)


@_memoizable
def spatial_pool(mode: str, f: Tensor) -> Tensor:
    """Average or max over all H*W positions of each channel -> ``C x 1 x 1``."""
    _require_map(f, "spatial_pool")
    v = f.data
    shape = v.shape
    h, w = shape[-2:]
    if mode == "avg":
        out = _shifted_mean(v, (-2, -1))
        return record("spatial_avg", out, (f,), lambda g: (np.broadcast_to(g / (h * w), shape),))
    if mode == "max":
        flat = v.reshape(shape[:-2] + (h * w,))
        idx = np.argmax(flat, axis=-1)[..., None]
        out = np.take_along_axis(flat, idx, axis=-1).reshape(shape[:-2] + (1, 1))

        def rule(g):
            gx = np.zeros(flat.shape)
            np.put_along_axis(gx, idx, g.reshape(idx.shape), axis=-1)
            return (gx.reshape(shape),)

        return record("spatial_max", out, (f,), rule)
    raise InvalidConfig(f"unknown pooling mode {mode!r}")


@_memoizable
def channel_pool(mode: str, f: Tensor) -> Tensor:
    """Average or max across channels at each position -> ``1 x H x W``."""
    _require_map(f, "channel_pool")
    v = f.data
    shape = v.shape
    c = shape[-3]
    if mode == "avg":
        out = _shifted_mean(v, -3)
        return record("channel_avg", out, (f,), lambda g: (np.broadcast_to(g / c, shape),))
    if mode == "max":
        idx = np.argmax(v, axis=-3)[..., None, :, :]
        out = np.take_along_axis(v, idx, axis=-3)

        def rule(g):
            gx = np.zeros(shape)
            np.put_along_axis(gx, idx, g, axis=-3)
            return (gx,)

        return record("channel_max", out, (f,), rule)
    raise InvalidConfig(f"unknown pooling mode {mode!r}")


@_memoizable
def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` max pooling; trailing rows/cols are dropped."""
    _require_map(x, "max_pool2d")
    v = x.data
    shape = v.shape
    h, w = shape[-2] // size, shape[-1] // size
    if h < 1 or w < 1:
        raise ShapeMismatch(f"cannot max-pool {shape} with window {size}")
    lead = shape[:-2]
    crop = v[..., : h * size, : w * size]
    win = crop.reshape(lead + (h, size, w, size))
    win = np.moveaxis(win, -3, -2).reshape(lead + (h, w, size * size))
    idx = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def rule(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gw = np.moveaxis(gw.reshape(lead + (h, w, size, size)), -2, -3)
        gx = np.zeros(shape)
        gx[..., : h * size, : w * size] = gw.reshape(lead + (h * size, w * size))
        return (gx,)

    return record("max_pool2d", out, (x,), rule)


@_memoizable
def concat(tensors: Sequence[Tensor], axis: int = -3) -> Tensor:
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


@_memoizable
def flatten(x: Tensor, start: int = 0) -> Tensor:
    """Row-major flatten of every axis from ``start`` on.

    ``start=0`` gives a rank-1 tensor; ``start=1`` keeps a batch axis.
    """
    shape = x.shape
    out = x.data.reshape(shape[:start] + (-1,))
    return record("flatten", out, (x,), lambda g: (g.reshape(shape),))


reshape_flatten = flatten


# ---------------------------------------------------------------------------
# layers


@_memoizable
def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weight @ v + bias``.

    Rank-1 and rank-2 inputs are transformed along their last axis. Feature
    maps (rank 3 or 4) are transformed along the channel axis, i.e. each
    spatial position is an independent length-C vector.
    """
    if weight.ndim != 2 or bias.shape != (weight.shape[0],):
        raise ShapeMismatch(f"bad dense parameters: weight {weight.shape}, bias {bias.shape}")
    n_out, n_in = weight.shape
    W, b = weight.data, bias.data
    shape = x.shape
    if x.ndim >= 3:
        if shape[-3] != n_in:
            raise ShapeMismatch(f"dense expects {n_in} channels, got shape {shape}")
        lead, spatial = shape[:-3], shape[-2:]
        v = x.data.reshape(lead + (n_in, -1))
        out = (W @ v + b[:, None]).reshape(lead + (n_out,) + spatial)

        def rule(g):
            g3 = g.reshape(lead + (n_out, -1))
            gx = (W.T @ g3).reshape(shape)
            gW = np.tensordot(g3, v, axes=(list(range(len(lead))) + [-1], list(range(len(lead))) + [-1]))
            return gx, gW, g3.sum(axis=tuple(range(len(lead))) + (-1,))
    else:
        if x.ndim == 0 or shape[-1] != n_in:
            raise ShapeMismatch(f"dense expects {n_in} input features, got shape {shape}")
        v = x.data
        out = v @ W.T + b

        def rule(g):
            g2 = g.reshape(-1, n_out)
            return g @ W, g2.T @ v.reshape(-1, n_in), g2.sum(axis=0)

    return record("dense", out, (x, weight, bias), rule)


@_memoizable
def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    ``x`` is ``C_in x H x W`` (or batched), ``kernel`` is
    ``C_out x C_in x kH x kW``; output extents are
    ``(H + 2*padding - kH) // stride + 1``.
    """
    _require_map(x, "conv2d")
    if kernel.ndim != 4:
        raise ShapeMismatch(f"kernel must be rank 4, got {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidConfig(f"kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise InvalidConfig(f"need stride >= 1 and padding >= 0, got {stride}, {padding}")
    if x.shape[-3] != c_in:
        raise ShapeMismatch(f"input has {x.shape[-3]} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeMismatch(f"bias must have shape ({c_out},), got {bias.shape}")
    batched = x.ndim == 4
    v = x.data if batched else x.data[None]
    n, _, h, w = v.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeMismatch(f"input {h}x{w} with padding {padding} is smaller than kernel {kh}x{kw}")
    vp = np.pad(v, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else v
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = sliding_window_view(vp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    K, b = kernel.data, bias.data
    out = np.tensordot(cols, K, axes=([1, 4, 5], [1, 2, 3]))  # n, ho, wo, c_out
    out = np.moveaxis(out, -1, 1) + b[:, None, None]
    if not batched:
        out = out[0]

    def rule(g):
        g4 = g if batched else g[None]
        gb = g4.sum(axis=(0, 2, 3))
        gk = np.tensordot(g4, cols, axes=([0, 2, 3], [0, 2, 3]))
        dcols = np.tensordot(g4, K, axes=([1], [0]))  # n, ho, wo, c_in, kh, kw
        gp = np.zeros(vp.shape)
        for i in range(kh):
            for j in range(kw):
                gp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.moveaxis(
                    dcols[..., i, j], -1, 1
                )
        gx = gp[:, :, padding : padding + h, padding : padding + w]
        return (gx if batched else gx[0]), gk, gb

    return record("conv2d", out, (x, kernel, bias), rule)


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor, graph: Graph, params: Sequence[Tensor] | None = None) -> dict:
    """Gradients of the scalar ``loss`` with respect to ``params``.

    Walks the tape once in reverse. When ``params`` is None, every leaf tensor
    with ``requires_grad`` that appears on the tape is reported. Parameters the
    loss does not depend on get a zero gradient of matching shape.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        produced.add(id(node.output))
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for inp, g in zip(node.inputs, node.rule(g_out)):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = g if prev is None else prev + g
            leaves[key] = inp
    if params is None:
        params = [t for k, t in leaves.items() if k not in produced]
    result = {}
    for p in params:
        g = grads.get(id(p))
        if g is None and p is loss:
            g = np.ones(loss.shape)
        result[p] = Tensor._wrap(np.zeros(p.shape) if g is None else np.array(g, dtype=np.float64).reshape(p.shape))
    return result


def gradient_errors(model_fn: Callable[[list], Tensor], params: Sequence[Tensor], eps: float = 1e-6):
    """Per-coordinate comparison of analytic and central-difference gradients.

    Returns ``(analytic, numeric, rel_err)``, three lists of arrays shaped like
    ``params``. Relative error is ``|a - n| / max(|a|, |n|, 1e-12)``.
    """
    if eps <= 0:
        raise InvalidConfig("eps must be positive")
    params = list(params)
    tracked = [Tensor._wrap(p.data, requires_grad=True) for p in params]
    with Graph() as g:
        loss = model_fn(tracked)
    grads = backward(loss, g, tracked)
    analytic = [grads[t].numpy() for t in tracked]

    numeric = []
    current = list(params)
    with memoize():
        for i, p in enumerate(params):
            numeric.append(_central_differences(model_fn, current, i, eps))
            current[i] = p
    rel = [np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12) for a, n in zip(analytic, numeric)]
    return analytic, numeric, rel


def gradient_check(model_fn: Callable[[list], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``model_fn`` maps a list of parameter tensors (same order as ``params``)
    to a scalar loss.
    """
    _, _, rel = gradient_errors(model_fn, params, eps)
    return float(max(r.max() for r in rel))


def _central_differences(model_fn, current, i, eps) -> np.ndarray:
    work = current[i].data.copy()
    flat = work.reshape(-1)
    out = np.empty(flat.size)

    def evaluate():
        # a fresh wrapper per perturbation so memoized results never go stale
        current[i] = Tensor._wrap(work.copy())
        return model_fn(current).item()

    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        f_plus = evaluate()
        flat[j] = orig - eps
        f_minus = evaluate()
        flat[j] = orig
        out[j] = (f_plus - f_minus) / (2 * eps)
    return out.reshape(work.shape)
