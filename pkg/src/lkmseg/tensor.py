"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float64 by default, float32 selectable). Every
differentiable primitive builds a graph edge holding a backward closure;
``backward(loss)`` walks the graph in reverse topological order and
accumulates gradients into the ``grad`` field of every leaf that has
``requires_grad`` set. Graph construction is single-threaded; evaluation
order is fixed, so repeated runs give bit-identical gradients.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import (
    AxisError,
    BroadcastError,
    GradError,
    GroupError,
    ShapeError,
)

_default_dtype = np.float64
# thread-local so parallel no-grad evaluation cannot clobber another
# thread's (or the main thread's) recording mode
_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


class no_grad:
    """Context manager disabling graph recording."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_default_dtype), requires_grad=requires_grad)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype.type)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise BroadcastError(f"shapes {a.shape} and {b.shape} do not broadcast") from e


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b)
    out = _make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b)
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    y = a.data * s
    return _make(y, (a,), lambda g: (g * (s + y * (1.0 - s)),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    y = np.logaddexp(0.0, a.data)
    s = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * s,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "silu": silu,
    "softplus": softplus,
    "scale": scale,
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    if op_kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    fn = _ELEMENTWISE[op_kind]
    return fn(a) if b is None else fn(a, b)


def where(mask, a, b) -> Tensor:
    """Select from two tensors by a constant boolean mask."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    y = np.where(mask, a.data, b.data)
    return _make(y, (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                            _unbroadcast(np.where(mask, 0.0, g), b.shape)))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    try:
        y = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(str(e)) from e

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _make(y, (a, b), bwd)


# ---------------------------------------------------------------------------
# convolutions


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int):
    B, C = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, (B, C, kh, kw, Ho, Wo),
                      (s0, s1, s2, s3, s2 * stride, s3 * stride))


def conv2d(x, w, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2D cross-correlation with stride/padding/groups.

    ``x`` is [B,C,H,W] or [C,H,W]; ``w`` is [Cout, Cin/groups, kh, kw].
    """
    x, w = _as_tensor(x), _as_tensor(w)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4D input and weights")
    B, Cin, H, W = x.shape
    Cout, Cg, kh, kw = w.shape
    if Cin % groups != 0 or Cout % groups != 0:
        raise GroupError(f"channels ({Cin}->{Cout}) not divisible by groups={groups}")
    if Cg != Cin // groups:
        raise ShapeError(f"weight group extent {Cg} != {Cin}//{groups}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"empty output for input {H}x{W}, kernel {kh}x{kw}")

    p, s, g = padding, stride, groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.ascontiguousarray(_im2col(xp, kh, kw, s, Ho, Wo))
    cols2 = cols.reshape(B, g, (Cin // g) * kh * kw, Ho * Wo)
    wm = w.data.reshape(g, Cout // g, (Cin // g) * kh * kw)
    y = np.matmul(wm[None], cols2).reshape(B, Cout, Ho, Wo)

    def bwd(gy):
        gy2 = gy.reshape(B, g, Cout // g, Ho * Wo)
        gw = np.matmul(gy2, cols2.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(wm.swapaxes(-1, -2)[None], gy2)
        gcols = gcols.reshape(B, Cin, kh, kw, Ho, Wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gcols[:, :, i, j]
        gx = gxp[:, :, p:p + H, p:p + W]
        return gx, gw

    out = _make(y, (x, w), bwd)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def conv_transpose2d(x, w, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel size == stride (non-overlapping)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv_transpose2d expects 4D input and weights")
    B, Cin, H, W = x.shape
    Ci2, Cout, kh, kw = w.shape
    if Ci2 != Cin:
        raise ShapeError(f"weight input channels {Ci2} != {Cin}")
    if kh != stride or kw != stride:
        raise ShapeError("kernel size must equal stride")
    k = stride
    t = np.tensordot(x.data, w.data, axes=([1], [0]))        # [B,H,W,Cout,k,k]
    y = t.transpose(0, 3, 1, 4, 2, 5).reshape(B, Cout, H * k, W * k)

    def bwd(g):
        gt = g.reshape(B, Cout, H, k, W, k).transpose(0, 2, 4, 1, 3, 5)
        gx = np.tensordot(gt, w.data, axes=([3, 4, 5], [1, 2, 3]))
        gx = gx.transpose(0, 3, 1, 2)
        gw = np.tensordot(x.data, gt, axes=([0, 2, 3], [0, 1, 2]))
        return np.ascontiguousarray(gx), gw

    return _make(y, (x, w), bwd)


# ---------------------------------------------------------------------------
# layout transforms


def reshape(t, shape) -> Tensor:
    t = _as_tensor(t)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} -> {shape}")
    old = t.shape
    return _make(t.data.reshape(shape), (t,), lambda g: (g.reshape(old),))


def permute(t, axes) -> Tensor:
    t = _as_tensor(t)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(t.ndim)):
        raise AxisError(f"invalid permutation {axes} for rank {t.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(t.data.transpose(axes)), (t,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def slice_(t, key) -> Tensor:
    t = _as_tensor(t)
    try:
        y = t.data[key]
    except IndexError as e:
        raise AxisError(str(e)) from e
    shape = t.shape

    def bwd(g):
        # basic (non-fancy) indexing only, so += never aliases
        gx = np.zeros(shape, dtype=t.data.dtype)
        gx[key] += g
        return (gx,)

    return _make(np.ascontiguousarray(y), (t,), bwd)


def flip(t, axis: int) -> Tensor:
    t = _as_tensor(t)
    if not -t.ndim <= axis < t.ndim:
        raise AxisError(f"axis {axis} out of range for rank {t.ndim}")
    return _make(np.ascontiguousarray(np.flip(t.data, axis)), (t,),
                 lambda g: (np.ascontiguousarray(np.flip(g, axis)),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    try:
        y = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        out = []
        for i in range(len(parts)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            out.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(out)

    return _make(y, parts, bwd)


def stack(parts, axis: int = 0) -> Tensor:
    parts = [reshape(_as_tensor(p), p.shape[:axis] + (1,) + p.shape[axis:]) for p in parts]
    return concat(parts, axis=axis)


def pad(t, pad_width) -> Tensor:
    """Zero padding; pad_width as in numpy ((before, after) per axis)."""
    t = _as_tensor(t)
    pad_width = tuple((int(a), int(b)) for a, b in pad_width)
    if len(pad_width) != t.ndim:
        raise ShapeError(f"pad_width rank {len(pad_width)} != tensor rank {t.ndim}")
    y = np.pad(t.data, pad_width)
    key = tuple(slice(a, a + s) for (a, _), s in zip(pad_width, t.shape))
    return _make(y, (t,), lambda g: (np.ascontiguousarray(g[key]),))


def expand(t, shape) -> Tensor:
    """Broadcast to a larger shape (gradient sums over broadcast axes)."""
    t = _as_tensor(t)
    shape = tuple(int(s) for s in shape)
    try:
        y = np.broadcast_to(t.data, shape)
    except ValueError as e:
        raise BroadcastError(str(e)) from e
    old = t.shape
    return _make(np.ascontiguousarray(y), (t,), lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(a) for a in axes)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise AxisError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise AxisError(f"duplicate axes {axes}")
    return tuple(sorted(out))


def reduce_sum(t, axes=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    axes = _norm_axes(axes, t.ndim)
    y = t.data.sum(axis=axes, keepdims=keepdims)
    shape = t.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(y), (t,), bwd)


def reduce_mean(t, axes=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    axes = _norm_axes(axes, t.ndim)
    n = int(np.prod([t.shape[a] for a in axes], dtype=np.int64))
    y = t.data.mean(axis=axes, keepdims=keepdims)
    shape = t.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(np.asarray(y), (t,), bwd)


def reduce_max(t, axes=None, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    axes = _norm_axes(axes, t.ndim)
    y = t.data.max(axis=axes, keepdims=True)
    mask = (t.data == y)
    counts = mask.sum(axis=axes, keepdims=True)
    out = y if keepdims else y.reshape([s for i, s in enumerate(t.shape) if i not in axes])

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (mask * (g / counts),)

    return _make(np.asarray(out), (t,), bwd)


_REDUCE = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(op_kind: str, t, axes=None, keepdims: bool = False) -> Tensor:
    if op_kind not in _REDUCE:
        raise ValueError(f"unknown reduce op {op_kind!r}")
    return _REDUCE[op_kind](t, axes, keepdims)


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Topologically ordered view of the graph below one root."""

    def __init__(self, root: Tensor):
        self.nodes = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))


def backward(loss: Tensor) -> dict:
    """Accumulate gradients of a scalar loss into every requires_grad leaf.

    Returns a map from leaf tensor to its gradient array.
    """
    if not isinstance(loss, Tensor):
        raise GradError("loss must be a Tensor")
    if loss.data.size != 1:
        raise GradError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradError("loss does not require grad")

    tape = Tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            if g is not None and node.requires_grad and node._backward is None:
                grads[id(node)] = g  # leaf, keep
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg

    result = {}
    for node in tape.nodes:
        g = grads.get(id(node))
        if g is None or node._backward is not None:
            continue
        g = np.asarray(g).reshape(node.shape)
        node.grad = g.copy() if node.grad is None else node.grad + g
        result[node] = g
    return result


def finite_diff_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the tensor to a scalar Tensor; relative error is
    |analytic - numeric| / max(1, |numeric|) per coordinate.
    """
    x.requires_grad = True
    x.zero_grad()
    loss = f(x)
    backward(loss)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if numeric.size else 0.0
