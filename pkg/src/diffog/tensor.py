"""Dense float64 arrays with a small define-by-run reverse-mode tape.

Every primitive builds a :class:`Tensor` node that remembers its parents and a
closure mapping the output adjoint to parent adjoints.  ``backward`` walks the
reachable nodes in reverse creation order, so custom nodes (the QP layer) slot
in by supplying their own closure through :func:`custom_op`.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_node_ids = itertools.count()


class ShapeError(ValueError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, index: int, pivot: float):
        super().__init__(f"matrix is not positive definite (pivot {index} = {pivot:.3e})")
        self.index = index
        self.pivot = pivot


class SingularTriangularError(np.linalg.LinAlgError):
    def __init__(self, index: int):
        super().__init__(f"triangular matrix is singular (zero diagonal at {index})")
        self.index = index


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite")
    return arr


class Tensor:
    """A node on the tape.  ``value`` is always a float64 ndarray."""

    __array_priority__ = 1000

    def __init__(self, value, parents: Sequence["Tensor"] = (), op: str = "const",
                 backward_fn: Callable | None = None, requires_grad: bool = False):
        self.value = _as_array(value)
        self.parents = tuple(parents)
        self.op = op
        self.id = next(_node_ids)
        self._backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """Trainable leaf; gradients accumulate into ``grad`` until ``zero_grad``."""

    def __init__(self, value, name: str = "param"):
        super().__init__(value, op="param", requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(value, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Record an externally computed node.

    ``backward_fn(grad_out)`` must return one adjoint (or None) per parent.
    """
    return Tensor(value, parents, op, backward_fn)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a.value, b.value, "add")
    return Tensor(a.value + b.value, (a, b), "add",
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a.value, b.value, "sub")
    return Tensor(a.value - b.value, (a, b), "sub",
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a.value, b.value, "mul")
    return Tensor(a.value * b.value, (a, b), "mul",
                  lambda g: (_unbroadcast(g * b.value, a.shape),
                             _unbroadcast(g * a.value, b.shape)))


def scale(a, c: float) -> Tensor:
    a = tensor(a)
    c = float(c)
    return Tensor(a.value * c, (a,), "scale", lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(out, (a, b), "matmul", backward)


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.value)
    return Tensor(out, (a,), "exp", lambda g: (g * out,))


def tanh(a) -> Tensor:
    a = tensor(a)
    out = np.tanh(a.value)
    return Tensor(out, (a,), "tanh", lambda g: (g * (1.0 - out ** 2),))


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.value > 0
    return Tensor(a.value * mask, (a,), "relu", lambda g: (g * mask,))


def softmax(a) -> Tensor:
    """Softmax over the last axis (row-softmax for matrices)."""
    a = tensor(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor(s, (a,), "softmax", backward)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine part)."""
    a = tensor(a)
    mu = a.value.mean(axis=-1, keepdims=True)
    xc = a.value - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return Tensor(xhat, (a,), "layer_norm", backward)


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    a = tensor(a)
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return Tensor(a.value * keep, (a,), "dropout", lambda g: (g * keep,))


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return Tensor(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def permute(a, axes) -> Tensor:
    a = tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor(np.transpose(a.value, axes), (a,), "permute",
                  lambda g: (np.transpose(g, inverse),))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got {a.shape}")
    return Tensor(np.swapaxes(a.value, -1, -2), (a,), "transpose",
                  lambda g: (np.swapaxes(g, -1, -2),))


def tril(a, k: int = 0) -> Tensor:
    a = tensor(a)
    mask = np.tril(np.ones(a.shape[-2:]), k)
    return Tensor(a.value * mask, (a,), "tril", lambda g: (g * mask,))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return Tensor(np.clip(a.value, lo, hi), (a,), "clamp", lambda g: (g * inside,))


def exp_diagonal(a, eps: float = 0.0) -> Tensor:
    """Replace the diagonal of each trailing square block with exp(diag) + eps."""
    a = tensor(a)
    n = a.shape[-1]
    if a.ndim < 2 or a.shape[-2] != n:
        raise ShapeError(f"exp_diagonal needs square trailing dims, got {a.shape}")
    idx = np.arange(n)
    # exp beyond 700 overflows; any such entry is clamped far below anyway
    d = np.exp(np.minimum(a.value[..., idx, idx], 700.0))
    out = a.value.copy()
    out[..., idx, idx] = d + eps

    def backward(g):
        ga = g.copy()
        ga[..., idx, idx] = g[..., idx, idx] * d
        return (ga,)

    return Tensor(out, (a,), "exp_diagonal", backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes "
                         + ", ".join(str(t.shape) for t in ts)) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return Tensor(out, ts, "concat", lambda g: tuple(np.split(g, sizes, axis=axis)))


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(out, (a,), "sum", backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tensor_sum(a, axis, keepdims), 1.0 / count)


def square(a) -> Tensor:
    return mul(a, a)


# ---------------------------------------------------------------------------
# reverse sweep

def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(param) into every reachable Parameter's ``grad``.

    Returns the adjoints of all visited nodes keyed by node id (useful for
    tests); callers normally ignore it.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    nodes: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in nodes or not node.requires_grad:
            continue
        nodes[node.id] = node
        stack.extend(node.parents)

    adjoints = {root.id: np.ones_like(root.value)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = adjoints.pop(nid, None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in adjoints:
                adjoints[parent.id] = adjoints[parent.id] + pg
            else:
                adjoints[parent.id] = np.array(pg, dtype=np.float64)
    return adjoints


# ---------------------------------------------------------------------------
# dense factorizations (not on the tape)

def cholesky_spd(A) -> np.ndarray:
    """Lower-triangular F with positive diagonal and F @ F.T == A."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"cholesky needs a square matrix, got {A.shape}")
    n = A.shape[0]
    F = np.zeros_like(A)
    for j in range(n):
        pivot = A[j, j] - F[j, :j] @ F[j, :j]
        if not pivot > 0.0:
            raise NotPositiveDefiniteError(j, pivot)
        F[j, j] = np.sqrt(pivot)
        F[j + 1:, j] = (A[j + 1:, j] - F[j + 1:, :j] @ F[j, :j]) / F[j, j]
    return F


def solve_triangular(F, b, lower: bool = True) -> np.ndarray:
    """Solve F x = b by substitution; ``b`` may be a vector or a matrix."""
    F = np.asarray(F, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = F.shape[0]
    if F.shape != (n, n) or b.shape[0] != n:
        raise ShapeError(f"solve_triangular: shapes {F.shape} and {b.shape}")
    diag = np.diag(F)
    zero = np.flatnonzero(diag == 0.0)
    if zero.size:
        raise SingularTriangularError(int(zero[0]))
    x = np.zeros_like(b)
    order = range(n) if lower else range(n - 1, -1, -1)
    for i in order:
        if lower:
            acc = F[i, :i] @ x[:i]
        else:
            acc = F[i, i + 1:] @ x[i + 1:]
        x[i] = (b[i] - acc) / F[i, i]
    return x
