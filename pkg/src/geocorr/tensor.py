"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every op that touches a gradient-requiring tensor records a
node (parents + vector-Jacobian closure) on the result. ``backward`` walks
the recorded graph once in reverse topological order, accumulates gradients
into leaves, and frees the graph so a second backward through the same nodes
is impossible.

All data is float64 in row-major (C) order; inputs are coerced on entry.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy import special as _sp

from .errors import AutodiffError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / data paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_float64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A dense float64 array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op", "version")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_float64(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None  # np.ndarray, set on leaves by backward()
        self._parents = ()
        self._vjp = None
        self._op = ""
        # bumped by the optimizer on in-place updates; consumers may cache on it
        self.version = 0

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="expected a single element")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array (no copy). Callers must not mutate it."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_leaf(self) -> bool:
        return self._vjp is None

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self._op!r}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar ------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return powc(self, exponent)

    def backward(self):
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, op: str) -> Tensor:
    """Wrap an op result, recording the node only when needed."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce an upstream gradient back to the operand's original shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise binary ops (with numpy broadcasting) ------------------


def _binary(op: str, a, b, fwd, da, db) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None

    def vjp(up):
        return (
            _unbroadcast(da(up, a.data, b.data), a.shape) if a.requires_grad else None,
            _unbroadcast(db(up, a.data, b.data), b.shape) if b.requires_grad else None,
        )

    return _make(data, (a, b), vjp, op)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y, lambda u, x, y: u, lambda u, x, y: u)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y, lambda u, x, y: u, lambda u, x, y: -u)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y, lambda u, x, y: u * y, lambda u, x, y: u * x)


def div(a, b):
    return _binary(
        "div", a, b, lambda x, y: x / y, lambda u, x, y: u / y, lambda u, x, y: -u * x / (y * y)
    )


# -- elementwise unary ops ---------------------------------------------


def _unary(op: str, a, fwd, dfn) -> Tensor:
    a = as_tensor(a)
    data = fwd(a.data)

    def vjp(up):
        return (dfn(up, a.data, data),)

    return _make(data, (a,), vjp, op)


def neg(a):
    return _unary("neg", a, lambda x: -x, lambda u, x, y: -u)


def exp(a):
    return _unary("exp", a, np.exp, lambda u, x, y: u * y)


def log(a):
    return _unary("log", a, np.log, lambda u, x, y: u / x)


def sqrt(a):
    return _unary("sqrt", a, np.sqrt, lambda u, x, y: u * 0.5 / y)


def absval(a):
    # subgradient 0 at exactly 0
    return _unary("abs", a, np.abs, lambda u, x, y: u * np.sign(x))


def relu(a):
    return _unary("relu", a, lambda x: np.maximum(x, 0.0), lambda u, x, y: u * (x > 0.0))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact Gaussian-error-linear unit, x * Phi(x)."""

    def fwd(x):
        return 0.5 * x * (1.0 + _sp.erf(x * _INV_SQRT2))

    def dfn(u, x, y):
        cdf = 0.5 * (1.0 + _sp.erf(x * _INV_SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return u * (cdf + x * pdf)

    return _unary("gelu", a, fwd, dfn)


def sin(a):
    return _unary("sin", a, np.sin, lambda u, x, y: u * np.cos(x))


def cos(a):
    return _unary("cos", a, np.cos, lambda u, x, y: -u * np.sin(x))


def powc(a, exponent: float):
    """Elementwise power with a constant exponent."""
    p = float(exponent)
    return _unary(f"pow{p}", a, lambda x: x**p, lambda u, x, y: u * p * x ** (p - 1.0))


# -- linear algebra ----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, detail="expects (n,k) @ (k,m)")
    data = a.data @ b.data

    def vjp(up):
        return (
            up @ b.data.T if a.requires_grad else None,
            a.data.T @ up if b.requires_grad else None,
        )

    return _make(data, (a, b), vjp, "matmul")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def vjp(up):
        return (np.transpose(up, inv),)

    return _make(data, (a,), vjp, "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, detail=f"cannot reshape to {shape}") from None
    orig = a.shape

    def vjp(up):
        return (up.reshape(orig),)

    return _make(data, (a,), vjp, "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(up):
        return tuple(np.split(up, offsets, axis=axis))

    return _make(data, tuple(ts), vjp, "concat")


def index_select(a, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; backward scatter-adds (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = np.take(a.data, idx, axis=axis)
    in_shape = a.shape

    def vjp(up):
        buf = np.zeros(in_shape, dtype=np.float64)
        moved = np.moveaxis(buf, axis, 0)
        np.add.at(moved, idx, np.moveaxis(up, axis, 0))
        return (buf,)

    return _make(data, (a,), vjp, "index_select")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def vjp(up):
        g = up
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _make(data, (a,), vjp, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a) -> Tensor:
    """Row-stochastic softmax over the last axis, max-shifted for stability."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def vjp(up):
        dot = (up * data).sum(axis=-1, keepdims=True)
        return (data * (up - dot),)

    return _make(data, (a,), vjp, "softmax")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def vjp(up):
        return (up - soft * up.sum(axis=-1, keepdims=True),)

    return _make(data, (a,), vjp, "log_softmax")


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = xc * inv

    def vjp(up):
        m1 = up.mean(axis=-1, keepdims=True)
        m2 = (up * data).mean(axis=-1, keepdims=True)
        return (inv * (up - m1 - data * m2),)

    return _make(data, (a,), vjp, "layer_norm")


def pairwise_sqdist(a, b) -> Tensor:
    """All-pairs squared L2 distances, (N,D) x (M,D) -> (N,M).

    Computed via the norm expansion so no N*M*D intermediate is formed.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("pairwise_sqdist", a.shape, b.shape, detail="expects (n,d) and (m,d)")
    aa = (a.data * a.data).sum(axis=1)[:, None]
    bb = (b.data * b.data).sum(axis=1)[None, :]
    data = np.maximum(aa + bb - 2.0 * (a.data @ b.data.T), 0.0)

    def vjp(up):
        ga = gb = None
        if a.requires_grad:
            ga = 2.0 * (a.data * up.sum(axis=1)[:, None] - up @ b.data)
        if b.requires_grad:
            gb = 2.0 * (b.data * up.sum(axis=0)[:, None] - up.T @ a.data)
        return (ga, gb)

    return _make(data, (a, b), vjp, "pairwise_sqdist")


def mat_inv(a) -> Tensor:
    """Inverse of a small square matrix. d(A^-1) = -A^-1 dA A^-1."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("mat_inv", a.shape, detail="expects a square matrix")
    data = np.linalg.inv(a.data)

    def vjp(up):
        return (-(data.T @ up @ data.T),)

    return _make(data, (a,), vjp, "mat_inv")


# -- backward ----------------------------------------------------------


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss.

    Accumulates into ``.grad`` of every reachable gradient-requiring leaf and
    returns a ``{leaf: grad_array}`` map. The graph is freed afterwards.
    """
    if not isinstance(loss, Tensor):
        raise AutodiffError("backward expects a Tensor loss")
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    if not loss.requires_grad:
        raise AutodiffError(
            "backward on a tensor with no recorded operations (empty tape); "
            "did every input have requires_grad=False?"
        )

    # iterative postorder: parents land before consumers
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_map: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        up = grads.pop(id(node), None)
        if up is None:
            continue
        if node._vjp is None:
            node.grad = up if node.grad is None else node.grad + up
            leaf_map[node] = node.grad
            continue
        parent_grads = node._vjp(up)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
        # free the tape as we go; a second backward will hit the empty-tape error
        node._vjp = None
        node._parents = ()
        node._op = ""
        node.requires_grad = False

    return leaf_map
