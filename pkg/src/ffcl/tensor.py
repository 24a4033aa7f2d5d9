"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive records its operands, an op name and a small
context on the output tensor. ``Tensor.backward`` walks the recorded graph in
reverse topological order and looks the backward rule up by op name in
``BACKWARD_RULES``, so a rule can be swapped out (tests corrupt one on purpose
to make sure the gradient checker notices).

Tensors are float32 unless a caller asks for another float dtype explicitly;
the finite-difference checker runs in float64.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, ValidationError

DEFAULT_DTYPE = np.float32
BCE_EPS = 1e-7
COSINE_EPS = 1e-12

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the active/inactive pattern of every piecewise op evaluated inside the block.

    Yields a list that fills with boolean masks (ReLU sign, BCE clamp range).
    Finite-difference checks use it to discard probes that straddle a kink.
    """
    prev = getattr(_state, "kinks", None)
    masks: list[np.ndarray] = []
    _state.kinks = masks
    try:
        yield masks
    finally:
        _state.kinks = prev


def _note_kink(mask: np.ndarray) -> None:
    kinks = getattr(_state, "kinks", None)
    if kinks is not None:
        kinks.append(mask)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_op", "_ctx")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._op: str | None = None
        self._ctx = None

    @classmethod
    def _result(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"], ctx=None) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._ctx = None
        out._parents = ()
        out._op = None
        out.requires_grad = False
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._op = op
            out._ctx = ctx
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A gradient-free leaf holding the same values; backward stops here."""
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ValidationError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = BACKWARD_RULES[node._op](node, g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take_rows(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype), dtype=like.dtype)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------
def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, "add", (a, b))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "sub")
    return Tensor._result(a.data - b.data, "sub", (a, b))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_shape(a, b, "mul")
    return Tensor._result(a.data * b.data, "mul", (a, b))


def relu(x: Tensor) -> Tensor:
    _note_kink(x.data > 0)
    return Tensor._result(np.maximum(x.data, 0), "relu", (x,))


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype)
    return Tensor._result(s, "sigmoid", (x,))


# -- reductions and reshapes --------------------------------------------------
def sum_(x: Tensor, axis=None) -> Tensor:
    return Tensor._result(np.asarray(x.data.sum(axis=axis)), "sum", (x,), axis)


def mean(x: Tensor, axis=None) -> Tensor:
    return Tensor._result(np.asarray(x.data.mean(axis=axis)), "mean", (x,), axis)


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._result(x.data.reshape(shape), "reshape", (x,))


def flatten(x: Tensor) -> Tensor:
    """[N, ...] -> [N, prod(...)]."""
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got shape {x.shape}")
    return Tensor._result(x.data.T, "transpose", (x,))


def take_rows(x: Tensor, index) -> Tensor:
    """Basic slicing along the leading axis."""
    if not isinstance(index, slice):
        raise ValidationError("only slices along axis 0 are supported")
    return Tensor._result(x.data[index], "take_rows", (x,), index)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Stack tensors along axis 0."""
    sizes = [t.shape[0] for t in tensors]
    tails = {t.shape[1:] for t in tensors}
    if len(tails) != 1:
        raise ShapeError(f"concat: trailing shapes differ {sorted(tails)}")
    return Tensor._result(np.concatenate([t.data for t in tensors]), "concat", tensors, sizes)


# -- linear algebra -------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return Tensor._result(a.data @ b.data, "matmul", (a, b))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``b[C]`` along axis 1 of ``x[N, C, ...]``."""
    if b.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not fit {x.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    return Tensor._result(x.data + b.data.reshape(view), "bias_add", (x, b))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation (no kernel flip) with optional per-channel bias."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects x[N,C,H,W] and w[O,C,kh,kw], got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ValidationError(f"conv2d: bad stride={stride} or padding={padding}")
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if cin != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel {w.shape} expects {cin}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(h + 2 * padding, wd + 2 * padding)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.data.reshape(cout, -1).T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {cout} output channels")
        out = out + b.data.reshape(1, -1, 1, 1)
        parents = (x, w, b)
    return Tensor._result(out, "conv2d", parents, (cols, stride, padding, xp.shape))


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    return Tensor._result(x.data.mean(axis=(2, 3)), "global_avg_pool", (x,))


# -- losses ---------------------------------------------------------------------
def cosine_similarity(e1: Tensor, e2: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Row-wise (e1.e2) / (|e1| |e2| + eps) for [B, D] inputs."""
    if e1.data.ndim != 2 or e1.shape != e2.shape or e1.shape[1] < 1:
        raise ShapeError(f"cosine_similarity: need matching [B,D] inputs, got {e1.shape} and {e2.shape}")
    dot = (e1.data * e2.data).sum(axis=1)
    n1 = np.sqrt((e1.data * e1.data).sum(axis=1))
    n2 = np.sqrt((e2.data * e2.data).sum(axis=1))
    den = n1 * n2 + eps
    # rounding can push |cos| a few ulp past 1; clamp the value only (the gradient is ~0 there anyway)
    cos = np.clip(dot / den, -1, 1)
    return Tensor._result(cos, "cosine_similarity", (e1, e2), (dot, n1, n2, den))


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 targets."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    if y.shape != p.shape:
        raise ShapeError(f"bce_loss: probabilities {p.shape} vs targets {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("bce_loss: targets must be 0 or 1")
    y = y.astype(p.dtype)
    pc = np.clip(p.data, BCE_EPS, 1 - BCE_EPS)
    _note_kink((p.data >= BCE_EPS) & (p.data <= 1 - BCE_EPS))
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).mean()
    return Tensor._result(np.asarray(loss, dtype=p.dtype), "bce_loss", (p,), (y, pc))


# -- backward rules ---------------------------------------------------------------
def _unreduce(g: np.ndarray, shape, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _add_bw(node, g):
    return g, g


def _sub_bw(node, g):
    return g, -g


def _mul_bw(node, g):
    a, b = node._parents
    return g * b.data, g * a.data


def _relu_bw(node, g):
    (x,) = node._parents
    return (g * (x.data > 0),)


def _sigmoid_bw(node, g):
    s = node.data
    return (g * s * (1 - s),)


def _sum_bw(node, g):
    (x,) = node._parents
    return (np.array(_unreduce(g, x.shape, node._ctx)),)


def _mean_bw(node, g):
    (x,) = node._parents
    count = x.data.size // max(node.data.size, 1)
    return (np.array(_unreduce(g, x.shape, node._ctx)) / x.dtype.type(count),)


def _reshape_bw(node, g):
    (x,) = node._parents
    return (g.reshape(x.shape),)


def _transpose_bw(node, g):
    return (g.T,)


def _take_rows_bw(node, g):
    (x,) = node._parents
    full = np.zeros_like(x.data)
    full[node._ctx] = g
    return (full,)


def _concat_bw(node, g):
    bounds = np.cumsum(node._ctx)[:-1]
    return tuple(np.split(g, bounds))


def _matmul_bw(node, g):
    a, b = node._parents
    return g @ b.data.T, a.data.T @ g


def _bias_add_bw(node, g):
    axes = (0,) + tuple(range(2, g.ndim))
    return g, g.sum(axis=axes)


def _conv2d_bw(node, g):
    x, w = node._parents[:2]
    cols, stride, padding, padded_shape = node._ctx
    n, _, ho, wo = g.shape
    cout, c, kh, kw = w.shape
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (g2.T @ cols).reshape(w.shape)
    dx = None
    if x.requires_grad:
        dcols = (g2 @ w.data.reshape(cout, -1)).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
        h, wd = padded_shape[2] - 2 * padding, padded_shape[3] - 2 * padding
        dx = dxp[:, :, padding:padding + h, padding:padding + wd]
    grads = (dx, dw)
    if len(node._parents) == 3:
        grads += (g.sum(axis=(0, 2, 3)),)
    return grads


def _gap_bw(node, g):
    (x,) = node._parents
    h, w = x.shape[2], x.shape[3]
    scale = x.dtype.type(1.0 / (h * w))
    return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),)


def _cosine_bw(node, g):
    e1, e2 = node._parents
    dot, n1, n2, den = node._ctx
    gd = (g / den)[:, None]
    # d|e|/de = e/|e|, taken as 0 at the origin
    u1 = np.divide(e1.data, n1[:, None], out=np.zeros_like(e1.data), where=n1[:, None] > 0)
    u2 = np.divide(e2.data, n2[:, None], out=np.zeros_like(e2.data), where=n2[:, None] > 0)
    ratio = (dot / den)[:, None]
    d1 = gd * (e2.data - ratio * n2[:, None] * u1)
    d2 = gd * (e1.data - ratio * n1[:, None] * u2)
    return d1, d2


def _bce_bw(node, g):
    (p,) = node._parents
    y, pc = node._ctx
    inside = (p.data >= BCE_EPS) & (p.data <= 1 - BCE_EPS)
    dp = (-(y / pc) + (1 - y) / (1 - pc)) / p.dtype.type(p.data.size)
    return (g * dp * inside,)


BACKWARD_RULES: dict[str, Callable] = {
    "add": _add_bw,
    "sub": _sub_bw,
    "mul": _mul_bw,
    "relu": _relu_bw,
    "sigmoid": _sigmoid_bw,
    "sum": _sum_bw,
    "mean": _mean_bw,
    "reshape": _reshape_bw,
    "transpose": _transpose_bw,
    "take_rows": _take_rows_bw,
    "concat": _concat_bw,
    "matmul": _matmul_bw,
    "bias_add": _bias_add_bw,
    "conv2d": _conv2d_bw,
    "global_avg_pool": _gap_bw,
    "cosine_similarity": _cosine_bw,
    "bce_loss": _bce_bw,
}


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
