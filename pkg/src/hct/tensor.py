"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure that maps the output gradient to
parent gradients. ``backward`` orders the recorded graph topologically and
walks it in reverse, so each node is visited exactly once per call.

Arrays are numpy ``float64`` by default; ``set_default_dtype`` switches new
tensors to ``float32``.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError, NumericalError, UsageError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_CHECK_FINITE = True
_ids = itertools.count()

# tanh-approximate GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715

NORM_EPS = 1e-12


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if _CHECK_FINITE and not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values produced by {what}")


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is None:
            floaty = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if floaty else _DEFAULT_DTYPE
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._id = next(_ids)

    # -- basic properties -------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name}: " if self.name else ""
        return f"Tensor({label}shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- graph and backward -----------------------------------------------------
class Graph:
    """Operations reachable from an output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.index = {id(n): k for k, n in enumerate(nodes)}

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring grad")
    graph = graph or Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            _check_finite(g, "backward")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return graph


# -- elementwise --------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)

    return _make(ad / bd, (a, b), grad_fn, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    inner = GELU_SQRT_2_OVER_PI * (xd + GELU_CUBIC * (xd * xd * xd))
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def grad_fn(g):
        dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), grad_fn, "gelu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- reductions and shape ops -------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.data.dtype

    items = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in items)

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(np.array(x.data[idx]), (x,), grad_fn, "getitem")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise DimensionError("concat needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    nd = xs[0].ndim
    ax = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or any(t.shape[k] != xs[0].shape[k] for k in range(nd) if k != ax):
            raise DimensionError(f"concat extent mismatch: {[t.shape for t in xs]} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def grad_fn(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.data for t in xs], axis=ax), xs, grad_fn, "concat")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=-1)


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    c = x.shape[-1]
    if not 0 <= lo < hi <= c:
        raise DimensionError(f"channel slice [{lo}:{hi}] out of range for {c} channels (shape {x.shape})")
    return getitem(x, (Ellipsis, slice(lo, hi)))


def pad_rows(x: Tensor, rows: int) -> Tensor:
    """Zero-pad the second-to-last axis up to ``rows``."""
    n = x.shape[-2]
    if n > rows:
        raise DimensionError(f"cannot pad {n} rows down to {rows}")
    if n == rows:
        return x
    pad = [(0, 0)] * x.ndim
    pad[-2] = (0, rows - n)
    return _make(np.pad(x.data, pad), (x,), lambda g: (g[..., :n, :],), "pad_rows")


# -- linear algebra -------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    K = ad.shape[-1]
    if bd.ndim == 2:
        # batched input times a weight matrix: one flat GEMM each way
        out = (ad.reshape(-1, K) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def grad_fn(g):
            g2 = g.reshape(-1, bd.shape[1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = ad.reshape(-1, K).T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), grad_fn, "matmul")
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from exc

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), grad_fn, "matmul")


# -- normalization and softmax ------------------------------------------------------
def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), grad_fn, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gd.shape) if gamma.requires_grad else None
        gbeta = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), grad_fn, "layer_norm")


def l2_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    if (norm <= eps).any():
        raise DegenerateInputError(f"cannot normalize a vector with norm <= {eps}")
    y = xd / norm

    def grad_fn(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make(y, (x,), grad_fn, "l2_normalize")


def cosine_sim(x: Tensor, y: Tensor) -> Tensor:
    return tsum(l2_normalize(x) * l2_normalize(y), axis=-1)


# -- spatio-temporal ops -------------------------------------------------------------
def depthwise_conv3d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 3D convolution with zero same-padding.

    ``x`` is ``[..., T, H, W, C]`` and ``kernel`` is ``[kt, kh, kw, C]`` with odd
    extents. Computed as a sum of shifted, channel-scaled copies of the
    padded input; no channel mixing.
    """
    if kernel.ndim != 4 or x.ndim < 4 or kernel.shape[-1] != x.shape[-1]:
        raise DimensionError(f"depthwise_conv3d shape mismatch: x {x.shape}, kernel {kernel.shape}")
    kt, kh, kw, _ = kernel.shape
    if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"depthwise_conv3d needs odd kernel extents, got {kernel.shape[:3]}")
    T, H, W = x.shape[-4:-1]
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    pad = [(0, 0)] * (x.ndim - 4) + [(pt, pt), (ph, ph), (pw, pw), (0, 0)]
    xp = np.pad(x.data, pad)
    kd = kernel.data
    out = np.zeros(x.shape, dtype=np.result_type(x.data, kd))
    taps = [(a, b, c) for a in range(kt) for b in range(kh) for c in range(kw)]
    for a, b, c in taps:
        out += xp[..., a:a + T, b:b + H, c:c + W, :] * kd[a, b, c]

    def grad_fn(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for a, b, c in taps:
                gxp[..., a:a + T, b:b + H, c:c + W, :] += g * kd[a, b, c]
            gx = gxp[..., pt:pt + T, ph:ph + H, pw:pw + W, :]
        if kernel.requires_grad:
            gk = np.zeros_like(kd)
            lead = tuple(range(g.ndim - 1))
            for a, b, c in taps:
                gk[a, b, c] = (g * xp[..., a:a + T, b:b + H, c:c + W, :]).sum(axis=lead)
        return gx, gk

    return _make(out, (x, kernel), grad_fn, "depthwise_conv3d")


def pool_st(x: Tensor, stride: Sequence[int], kind: str = "avg") -> Tensor:
    """Non-overlapping spatio-temporal pooling over ``[..., l, h, m, C]``.

    Window equals stride; trailing partial windows are pooled over the cells
    they contain, giving ``ceil(dim / stride)`` outputs per axis.
    """
    st = tuple(int(s) for s in stride)
    if len(st) != 3 or min(st) < 1:
        raise ConfigError(f"pool strides must be three integers >= 1, got {stride}")
    if kind not in ("avg", "max"):
        raise ConfigError(f"unknown pooling kind {kind!r}")
    if st == (1, 1, 1):
        return x
    if x.ndim < 4:
        raise DimensionError(f"pool_st expects [..., l, h, m, C], got {x.shape}")
    dims = x.shape[-4:-1]
    outs = tuple(-(-d // s) for d, s in zip(dims, st))
    padded = tuple(o * s for o, s in zip(outs, st))
    lead = x.shape[:-4]
    C = x.shape[-1]
    xd = x.data
    nlead = len(lead)
    win_shape = lead + (outs[0], st[0], outs[1], st[1], outs[2], st[2], C)
    win_axes = (nlead + 1, nlead + 3, nlead + 5)
    fill = 0.0 if kind == "avg" else -np.inf
    pad = [(0, 0)] * nlead + [(0, p - d) for p, d in zip(padded, dims)] + [(0, 0)]
    xp = np.pad(xd, pad, constant_values=fill) if padded != dims else xd
    w = xp.reshape(win_shape)

    if kind == "avg":
        ones = np.pad(np.ones(dims), [(0, p - d) for p, d in zip(padded, dims)])
        counts = ones.reshape(outs[0], st[0], outs[1], st[1], outs[2], st[2]).sum(axis=(1, 3, 5))[..., None]
        out = w.sum(axis=win_axes) / counts

        def grad_fn(g):
            gw = np.expand_dims(g / counts, win_axes)
            gw = np.broadcast_to(gw, win_shape).reshape(lead + padded + (C,))
            return (gw[..., :dims[0], :dims[1], :dims[2], :],)
    else:
        out = w.max(axis=win_axes)

        def grad_fn(g):
            hit = w == np.expand_dims(out, win_axes)
            hit = hit / hit.sum(axis=win_axes, keepdims=True)
            gw = (hit * np.expand_dims(g, win_axes)).reshape(lead + padded + (C,))
            return (gw[..., :dims[0], :dims[1], :dims[2], :],)

    return _make(np.ascontiguousarray(out), (x,), grad_fn, f"pool_{kind}")


# -- fused losses -------------------------------------------------------------
def bce_with_logits(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Elementwise binary cross-entropy on logits, stable for large |z|."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    w = np.ones_like(z) if weights is None else np.broadcast_to(np.asarray(weights, dtype=z.dtype), z.shape)
    out = w * (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z))))
    p = _sigmoid(z)
    return _make(out, (logits,), lambda g: (g * w * (p - t),), "bce_with_logits")


# -- finite-difference checking --------------------------------------------------------
def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor], eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps the input tensors to a scalar tensor. Every coordinate of every
    input with ``requires_grad`` is perturbed, or a seeded sample of at most
    ``max_coords`` per input; the error per coordinate is
    ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    inputs = list(inputs)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    out = f(*inputs)
    backward(out)
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            if not t.requires_grad:
                continue
            ga = np.zeros_like(t.data) if ga is None else ga
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            coords = range(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(np.random.default_rng(seed).choice(flat.size, max_coords, replace=False))
            for k in coords:
                orig = flat[k]
                flat[k] = orig + eps
                fp = float(f(*inputs).data)
                flat[k] = orig - eps
                fm = float(f(*inputs).data)
                flat[k] = orig
                num = (fp - fm) / (2.0 * eps)
                worst = max(worst, abs(gflat[k] - num) / max(1e-8, abs(num)))
    for t in inputs:
        t.grad = None
    return worst
