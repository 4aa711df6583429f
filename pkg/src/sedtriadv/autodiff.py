"""Reverse-mode automatic differentiation on dense numpy arrays.

A Tensor produced by an operation keeps references to its parents and a
closure computing vector-Jacobian products, so the computation history forms
an implicit DAG. ``backward`` on a scalar walks that DAG once in reverse
topological order, accumulating gradient contributions additively; saved
state is freed afterwards and a second walk raises GraphConsumed.

Training runs in float32; tests build float64 tensors for tight
finite-difference comparisons. Dtypes follow the input arrays.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, GraphConsumed, ShapeError

_grad_enabled = True
_nan_check = False


def set_nan_check(enabled: bool) -> None:
    """Toggle a finiteness assertion after every op (slow; for debugging/tests)."""
    global _nan_check
    _nan_check = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense real array plus the bookkeeping for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, axis, keepdims, mean=False)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, axis, keepdims, mean=True)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


class Parameter(Tensor):
    """Named trainable tensor; ``grad`` accumulates across backward passes
    until the optimizer zeroes it."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, copy=True), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def make_node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Create a graph node. ``vjp(upstream)`` must return one gradient array
    (or None) per parent. Extension point for fused ops such as losses."""
    if _nan_check and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an op")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor with requires_grad set.

    Contributions accumulate additively, so shared subgraphs are handled
    correctly. Frees saved activations; a repeated call raises GraphConsumed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar, got shape {loss.data.shape}")
    # iterative DFS: recurrent nets produce chains deeper than Python's stack
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._consumed:
            raise GraphConsumed("graph state was freed by a previous backward")
        stack.append((node, True))
        for p in node._parents:
            if id(p) in seen:
                continue
            if p._consumed:
                raise GraphConsumed("graph state was freed by a previous backward")
            if p._vjp is not None:
                stack.append((p, False))
            else:
                seen.add(id(p))
                order.append(p)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g.copy() if g.base is not None else g
            else:
                parent.grad = parent.grad + g
        node._vjp = None
        node._parents = ()
        node._consumed = True
        if node is not loss:
            node.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    return make_node(data, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    return make_node(data, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return make_node(a.data @ b.data, (a, b), lambda g: (
        g @ b.data.T, a.data.T @ g))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    y[~pos] = e / (1.0 + e)
    return make_node(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_node(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0)
    return make_node(y, (a,), lambda g: (g * (a.data > 0),))


def softmax(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return make_node(y, (a,), vjp)


def _reduce(a: Tensor, axis, keepdims: bool, mean: bool) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims) if mean \
        else a.data.sum(axis=axis, keepdims=keepdims)
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    axes = tuple(int(ax) % a.ndim for ax in axes)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        g = np.broadcast_to(g, a.data.shape)
        return (g / count if mean else g,)

    return make_node(data, (a,), vjp)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(data, tuple(tensors), vjp)


def stack(tensors: list[Tensor], axis: int) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,),
                     lambda g: (g.transpose(inverse),))


def slice_(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def vjp(g):
        out = np.zeros_like(a.data)
        out[key] = g  # basic slicing only: indices never repeat
        return (out,)

    return make_node(data, (a,), vjp)


def grad_reverse(a: Tensor, alpha: float) -> Tensor:
    """Identity on values; multiplies the upstream gradient by -alpha."""
    if alpha < 0:
        raise ConfigError(f"grad_reverse: alpha must be >= 0, got {alpha}")
    return make_node(a.data, (a,), lambda g: ((-alpha) * g,))


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------

def _conv2d_raw(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of (N,C,Tp,Fp) with (O,C,kh,kw) -> (N,O,T,F)."""
    n, c, _, _ = xp.shape
    o, _, kh, kw = w.shape
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))   # (N,C,T,F,kh,kw)
    t, f = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * t * f, c * kh * kw)
    out = cols @ w.reshape(o, c * kh * kw).T
    return out.reshape(n, t, f, o).transpose(0, 3, 1, 2), cols


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' 2-D convolution; x (N,C,T,F), w (O,C,kh,kw), odd kernels."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}")
    o, c, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel sizes must be odd")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out, cols = _conv2d_raw(xp, w.data)
    if b is not None:
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias {b.shape} for {o} channels")
        out = out + b.data[None, :, None, None]

    n, _, t, f = out.shape

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * t * f, o)
        gw = (cols.T @ gmat).T.reshape(o, c, kh, kw)
        gx = None
        if x.requires_grad:
            # input gradient: full correlation of g with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (C,O,kh,kw)
            gxp, _ = _conv2d_raw(gp, np.ascontiguousarray(wflip))
            gx = gxp[:, :, ph:ph + t, pw:pw + f] if (ph or pw) else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(gmat.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, vjp)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' 1-D convolution; x (N,C,T), w (O,C,k), odd kernel."""
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: x {x.shape}, w {w.shape}")
    x4 = reshape(x, x.shape + (1,))
    w4 = reshape(w, w.shape + (1,))
    out = conv2d(x4, w4, b)
    return reshape(out, out.shape[:3])


def max_pool2d(x: Tensor, pool: tuple[int, int]) -> Tensor:
    """Non-overlapping max pooling over the trailing two axes of (N,C,T,F)."""
    pt, pf = pool
    n, c, t, f = x.shape
    if t % pt or f % pf:
        raise ShapeError(f"max_pool2d: {x.shape} not divisible by {pool}")
    t2, f2 = t // pt, f // pf
    win = x.data.reshape(n, c, t2, pt, f2, pf)
    out = win.max(axis=(3, 5))

    def vjp(g):
        # subgradient at ties: split the incoming gradient equally
        mask = win == out[:, :, :, None, :, None]
        counts = mask.sum(axis=(3, 5), keepdims=True, dtype=g.dtype)
        gx = mask * (g[:, :, :, None, :, None] / counts)
        return (gx.reshape(n, c, t, f),)

    return make_node(out, (x,), vjp)


def gru_sequence(gates_x: Tensor, w_hh: Tensor, b_hh: Tensor,
                 reverse: bool = False) -> Tensor:
    """Full GRU recurrence from precomputed input projections.

    gates_x (N,T,3H) in gate order (reset, update, candidate); returns all
    hidden states (N,T,H). The initial state is zero. ``reverse`` runs the
    recurrence right-to-left (output stays index-aligned with the input).
    Backward is a single in-place BPTT pass, equivalent to chaining
    ``gru_cell`` but without per-step graph nodes.
    """
    if gates_x.ndim != 3 or gates_x.shape[2] % 3:
        raise ShapeError(f"gru_sequence: gates {gates_x.shape}")
    n, t, h3 = gates_x.shape
    h = h3 // 3
    if w_hh.shape != (h3, h) or b_hh.shape != (h3,):
        raise ShapeError(f"gru_sequence: w_hh {w_hh.shape}, b_hh {b_hh.shape}")
    gx, w, b = gates_x.data, w_hh.data, b_hh.data
    steps = range(t - 1, -1, -1) if reverse else range(t)
    hs = np.zeros((n, t, h), dtype=gx.dtype)
    rs = np.empty_like(hs)
    zs = np.empty_like(hs)
    cs = np.empty_like(hs)
    hns = np.empty_like(hs)
    prev = np.zeros((n, h), dtype=gx.dtype)
    for i in steps:
        gh = prev @ w.T + b
        xr, xz, xn = np.split(gx[:, i], 3, axis=1)
        hr, hz, hn = np.split(gh, 3, axis=1)
        with np.errstate(over="ignore"):  # exp overflow saturates correctly
            r = 1.0 / (1.0 + np.exp(-(xr + hr)))
            z = 1.0 / (1.0 + np.exp(-(xz + hz)))
        c = np.tanh(xn + r * hn)
        prev = (1.0 - z) * c + z * prev
        rs[:, i], zs[:, i], cs[:, i], hns[:, i], hs[:, i] = r, z, c, hn, prev

    def vjp(g):
        dg = np.zeros_like(gx)
        dw = np.zeros_like(w)
        db = np.zeros_like(b)
        dh = np.zeros((n, h), dtype=gx.dtype)
        for i in reversed(steps):
            gt = g[:, i] + dh
            r, z, c, hn = rs[:, i], zs[:, i], cs[:, i], hns[:, i]
            first = i == steps[0]
            prev_h = np.zeros((n, h), dtype=gx.dtype) if first \
                else hs[:, i + (1 if reverse else -1)]
            dn = gt * (1.0 - z)
            dz = gt * (prev_h - c)
            da_n = dn * (1.0 - c * c)
            dr = da_n * hn
            ds = da_n * r
            da_z = dz * z * (1.0 - z)
            da_r = dr * r * (1.0 - r)
            dg[:, i, :h] = da_r
            dg[:, i, h:2 * h] = da_z
            dg[:, i, 2 * h:] = da_n
            d_gh = np.concatenate([da_r, da_z, ds], axis=1)
            dh = gt * z + d_gh @ w
            dw += d_gh.T @ prev_h
            db += d_gh.sum(axis=0)
        return (dg, dw, db)

    return make_node(hs, (gates_x, w_hh, b_hh), vjp)


def gru_cell(gates_x: Tensor, h: Tensor, w_hh: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU step. ``gates_x`` is the precomputed input projection (N,3H)
    in gate order (reset, update, candidate); h (N,H); w_hh (3H,H); b_hh (3H,).

    r = sig(xr + hr); z = sig(xz + hz); n = tanh(xn + r*hn);
    h' = (1-z)*n + z*h
    """
    nh = h.shape[1]
    if gates_x.shape != (h.shape[0], 3 * nh) or w_hh.shape != (3 * nh, nh) \
            or b_hh.shape != (3 * nh,):
        raise ShapeError(
            f"gru_cell: gates_x {gates_x.shape}, h {h.shape}, "
            f"w_hh {w_hh.shape}, b_hh {b_hh.shape}")
    gh = h.data @ w_hh.data.T + b_hh.data
    xr, xz, xn = np.split(gates_x.data, 3, axis=1)
    hr, hz, hn = np.split(gh, 3, axis=1)
    with np.errstate(over="ignore"):  # exp overflow saturates to the right limit
        r = 1.0 / (1.0 + np.exp(-(xr + hr)))
        z = 1.0 / (1.0 + np.exp(-(xz + hz)))
    n = np.tanh(xn + r * hn)
    out = (1.0 - z) * n + z * h.data

    def vjp(g):
        dn = g * (1.0 - z)
        dz = g * (h.data - n)
        da_n = dn * (1.0 - n * n)
        dr = da_n * hn
        ds = da_n * r
        da_z = dz * z * (1.0 - z)
        da_r = dr * r * (1.0 - r)
        d_gx = np.concatenate([da_r, da_z, da_n], axis=1)
        d_gh = np.concatenate([da_r, da_z, ds], axis=1)
        dh = g * z + d_gh @ w_hh.data
        dw = d_gh.T @ h.data
        db = d_gh.sum(axis=0)
        return (d_gx, dh, dw, db)

    return make_node(out, (gates_x, h, w_hh, b_hh), vjp)
