"""Trajectory algebra: selection, differencing and assembly of the smoothing QP.

A chunk of ``T_p`` actions with ``D_a`` dimensions is flattened step-major,
``[a_0, a_1, ...]``.  Only the ``D_c`` selected dimensions are smoothed and
constrained.  The assembled problem is::

    minimize   1/2 y'Qy - a'y + alpha/2 * ||A S y||^2
    subject to d_min*dt <= c_{k+1} - c_k <= d_max*dt,   c = S y

with ``A`` the finite-difference operator.  The linear term is ``-a`` so that
``Q = I`` with ``alpha = 0`` reproduces the input exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qp import QpInstance


@dataclass
class ActionChunk:
    values: np.ndarray
    T_p: int
    D_a: int
    dt: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != self.T_p * self.D_a:
            raise ValueError(f"chunk has {self.values.size} values, expected "
                             f"{self.T_p} x {self.D_a}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("chunk values must be finite")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @classmethod
    def from_matrix(cls, actions, dt=1.0):
        actions = np.asarray(actions, dtype=np.float64)
        return cls(actions.reshape(-1), actions.shape[0], actions.shape[1], dt)

    @property
    def matrix(self) -> np.ndarray:
        return self.values.reshape(self.T_p, self.D_a)


@dataclass
class SelectionSpec:
    D_a: int
    selected: tuple

    def __post_init__(self):
        self.selected = tuple(int(i) for i in self.selected)
        if not self.selected:
            raise ValueError("selection is empty, nothing to optimize")
        if len(set(self.selected)) != len(self.selected):
            raise ValueError(f"duplicate indices in selection {self.selected}")
        if min(self.selected) < 0 or max(self.selected) >= self.D_a:
            raise ValueError(f"selection {self.selected} outside [0, {self.D_a})")

    @property
    def D_c(self) -> int:
        return len(self.selected)

    @property
    def unselected(self) -> tuple:
        return tuple(i for i in range(self.D_a) if i not in self.selected)


@dataclass
class ConstraintSpec:
    """Derivative bounds in action units per second.

    ``d_min``/``d_max`` are either one vector of length ``D_c`` or a
    ``(T_p, D_c)`` array of per-step bounds.  Row ``k >= 1`` bounds
    ``c_k - c_{k-1}``; row 0 bounds the link ``c_0 - prev_action`` and is only
    used at inference.
    """

    d_min: np.ndarray
    d_max: np.ndarray
    value_min: np.ndarray | None = None
    value_max: np.ndarray | None = None
    prev_action: np.ndarray | None = None

    def __post_init__(self):
        self.d_min = np.asarray(self.d_min, dtype=np.float64)
        self.d_max = np.asarray(self.d_max, dtype=np.float64)
        if self.d_min.shape != self.d_max.shape:
            raise ValueError("d_min and d_max shapes differ")
        if not np.all(self.d_min < self.d_max):
            raise ValueError("need d_min < d_max elementwise")
        if (self.value_min is None) != (self.value_max is None):
            raise ValueError("value bounds must be given as a pair")
        if self.value_min is not None:
            self.value_min = np.asarray(self.value_min, dtype=np.float64)
            self.value_max = np.asarray(self.value_max, dtype=np.float64)
            if not np.all(self.value_min < self.value_max):
                raise ValueError("need value_min < value_max elementwise")
        if self.prev_action is not None:
            self.prev_action = np.asarray(self.prev_action, dtype=np.float64)

    @classmethod
    def symmetric(cls, bound, D_c, dt=1.0, **kw):
        """Bounds of +-``bound`` per step, i.e. +-bound/dt per second."""
        b = np.broadcast_to(np.asarray(bound, dtype=np.float64) / dt, (D_c,)).copy()
        return cls(-b, b, **kw)


@dataclass
class SmoothingSpec:
    alpha: float = 0.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


def build_selection(spec: SelectionSpec, T_p: int) -> np.ndarray:
    """Block-diagonal selection matrix of shape (T_p*D_c, T_p*D_a)."""
    S = np.zeros((spec.D_c, spec.D_a))
    S[np.arange(spec.D_c), list(spec.selected)] = 1.0
    return np.kron(np.eye(T_p), S)


def build_difference(T_p: int, D_c: int, dt: float) -> np.ndarray:
    """Rows give (c_{k+1} - c_k)/dt blockwise; shape ((T_p-1)*D_c, T_p*D_c)."""
    if T_p < 2:
        raise ValueError("need at least two steps to take differences")
    D = np.zeros((T_p - 1, T_p))
    k = np.arange(T_p - 1)
    D[k, k] = -1.0
    D[k, k + 1] = 1.0
    return np.kron(D, np.eye(D_c)) / dt


def smoothing_matrix(T_p: int, sel: SelectionSpec, dt: float) -> np.ndarray:
    """S'A'AS, the Hessian of the squared-derivative term."""
    AS = build_difference(T_p, sel.D_c, dt) @ build_selection(sel, T_p)
    return AS.T @ AS


def _per_step(bound, T_p, D_c):
    b = np.asarray(bound, dtype=np.float64)
    if b.ndim == 1:
        b = np.broadcast_to(b, (T_p, D_c))
    if b.shape != (T_p, D_c):
        raise ValueError(f"bounds have shape {b.shape}, expected ({D_c},) or {(T_p, D_c)}")
    return b


def constraint_rows(T_p: int, sel: SelectionSpec, dt: float, *, link=False,
                    value_bounds=False) -> np.ndarray:
    """Inequality matrix G; row order is upper, lower, link, value bounds."""
    Dc = sel.D_c
    S = build_selection(sel, T_p)
    diff = build_difference(T_p, Dc, 1.0) @ S
    blocks = [diff, -diff]
    if link:
        first = S[:Dc]
        blocks += [first, -first]
    if value_bounds:
        blocks += [S, -S]
    return np.vstack(blocks)


def constraint_bounds(T_p: int, sel: SelectionSpec, dt: float, cons: ConstraintSpec,
                      link=False, prev=None) -> np.ndarray:
    """Right-hand side h matching ``constraint_rows``; ``prev`` may be batched (B, D_c)."""
    Dc = sel.D_c
    lo = _per_step(cons.d_min, T_p, Dc) * dt
    hi = _per_step(cons.d_max, T_p, Dc) * dt
    if prev is None:
        prev = cons.prev_action
    single = prev is None or np.ndim(prev) == 1
    if link:
        if prev is None:
            raise ValueError("inference mode needs prev_action")
        prev = np.atleast_2d(np.asarray(prev, dtype=np.float64))
        if prev.shape[-1] != Dc:
            raise ValueError(f"prev_action has {prev.shape[-1]} entries, expected {Dc}")
    B = 1 if single else len(prev)
    row = lambda v: np.broadcast_to(np.asarray(v).reshape(-1), (B, np.size(v)))
    parts = [row(hi[1:]), row(-lo[1:])]
    if link:
        parts += [prev + hi[0], -(prev + lo[0])]
    if cons.value_min is not None:
        parts += [row(np.broadcast_to(cons.value_max, (T_p, Dc))),
                  row(-np.broadcast_to(cons.value_min, (T_p, Dc)))]
    h = np.concatenate(parts, axis=1)
    return h[0] if single else h


def passthrough_mask(T_p: int, sel: SelectionSpec) -> np.ndarray:
    """Boolean vector marking flattened entries of unselected dimensions."""
    mask = np.zeros((T_p, sel.D_a), dtype=bool)
    mask[:, list(sel.unselected)] = True
    return mask.reshape(-1)


def decouple(Q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace rows/columns of ``mask`` entries with identity so they pass through."""
    Q = np.array(Q, dtype=np.float64, copy=True)
    Q[..., mask, :] = 0.0
    Q[..., :, mask] = 0.0
    idx = np.flatnonzero(mask)
    Q[..., idx, idx] = 1.0
    return Q


def assemble(chunk: ActionChunk, Q, smoothing: SmoothingSpec, sel: SelectionSpec,
             cons: ConstraintSpec, mode: str = "train", passthrough: bool = False) -> QpInstance:
    """Build the QP instance for one chunk.  ``Q`` is an array or anything with ``.Q``."""
    if mode not in ("train", "inference"):
        raise ValueError(f"unknown mode {mode!r}")
    if sel.D_a != chunk.D_a:
        raise ValueError(f"selection is for D_a={sel.D_a}, chunk has D_a={chunk.D_a}")
    Q = np.asarray(getattr(Q, "Q", Q), dtype=np.float64)
    n = chunk.T_p * chunk.D_a
    if Q.shape != (n, n):
        raise ValueError(f"Q has shape {Q.shape}, expected {(n, n)}")
    if passthrough:
        Q = decouple(Q, passthrough_mask(chunk.T_p, sel))
    P = Q + smoothing.alpha * smoothing_matrix(chunk.T_p, sel, chunk.dt)
    P = 0.5 * (P + P.T)
    link = mode == "inference"
    if link and cons.prev_action is None:
        raise ValueError("inference mode needs prev_action")
    G = constraint_rows(chunk.T_p, sel, chunk.dt, link=link,
                        value_bounds=cons.value_min is not None)
    h = constraint_bounds(chunk.T_p, sel, chunk.dt, cons, link=link)
    return QpInstance(P, -chunk.values, G, h)


def smoothness_cost(y, sel: SelectionSpec, T_p: int, dt: float) -> float:
    """||A S y||^2 for a flattened chunk ``y``."""
    y = np.asarray(getattr(y, "values", y), dtype=np.float64).reshape(-1)
    c = y.reshape(T_p, sel.D_a)[:, list(sel.selected)]
    return float((np.diff(c, axis=0) ** 2).sum() / dt ** 2)


def residual_form(Q, a):
    """Return (R, g) with Q = R'R and g = R'^{-1} a.

    ``1/2 ||R y - g||^2`` then equals ``1/2 y'Qy - a'y`` up to a constant.
    """
    L = np.linalg.cholesky(np.asarray(Q, dtype=np.float64))
    R = L.T
    g = np.linalg.solve(L, np.asarray(a, dtype=np.float64))
    return R, g
