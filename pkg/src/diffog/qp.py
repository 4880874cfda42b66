"""Batched strictly convex QP solver with an analytic KKT backward pass.

Problems have the form::

    minimize  1/2 y'Py + q'y   subject to  Gy <= h

The forward solve is a primal-dual interior-point method with Mehrotra's
predictor-corrector, separate primal and dual step lengths and a starting
point taken from one affine Newton step.  Once the residual is small the
active set is read off and solved exactly.  Instances in a batch are iterated in lock-step but each
one freezes as soon as its own KKT residual drops below ``tol``, so a batched
solve returns the same iterates as solving each instance on its own.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, custom_op

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50
FEAS_TOL = 1e-6
KKT_REGULARIZATION = 1e-10
POLISH_START = 1e-5         # residual below which an exact active-set solve is tried


class QpError(RuntimeError):
    """Base class for solver failures; ``index`` is the batch position."""

    def __init__(self, message, index=None):
        if index is not None:
            message = f"{message} (batch index {index})"
        super().__init__(message)
        self.index = index


class QpConvergenceError(QpError):
    def __init__(self, residual, iterations, index=None):
        super().__init__(f"interior point did not converge in {iterations} iterations, "
                         f"residual {residual:.3e}", index)
        self.residual = residual
        self.iterations = iterations


class QpDefinitenessError(QpError):
    pass


@dataclass
class QpInstance:
    P: np.ndarray
    q: np.ndarray
    G: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1)
        n = self.q.size
        self.G = np.asarray(self.G, dtype=np.float64).reshape(-1, n)
        self.h = np.asarray(self.h, dtype=np.float64).reshape(-1)
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if self.G.shape[0] != self.h.size:
            raise ValueError(f"G has {self.G.shape[0]} rows but h has {self.h.size}")
        scale = max(1.0, float(np.abs(self.P).max(initial=0.0)))
        if np.abs(self.P - self.P.T).max(initial=0.0) > 1e-12 * scale:
            raise ValueError("P is not symmetric")

    @property
    def n(self):
        return self.q.size

    @property
    def m(self):
        return self.h.size

    def objective(self, y) -> float:
        return 0.5 * y @ self.P @ y + self.q @ y


@dataclass
class QpSolution:
    y_star: np.ndarray
    lambda_star: np.ndarray
    slack: np.ndarray
    iterations: int
    kkt_residual: float
    diagnostics: dict = field(default_factory=dict)


@dataclass
class BatchSolution:
    """Array form of a batch of solutions (leading axis is the batch)."""

    y: np.ndarray
    lam: np.ndarray
    slack: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray

    def __len__(self):
        return self.y.shape[0]

    def item(self, i) -> QpSolution:
        return QpSolution(self.y[i].copy(), self.lam[i].copy(), self.slack[i].copy(),
                          int(self.iterations[i]), float(self.residual[i]))


def _step_to_boundary(v, dv):
    """Largest a in [0, 1] keeping v + a*dv >= 0, per batch row."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dv < 0, -v / dv, np.inf)
    return np.minimum(1.0, ratio.min(axis=-1, initial=np.inf))


def _cholesky(K, where):
    try:
        return np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        for i in range(K.shape[0]):
            try:
                np.linalg.cholesky(K[i])
            except np.linalg.LinAlgError:
                raise QpDefinitenessError(f"{where} is not positive definite", i) from None
        raise


def _mv(A, x):
    return np.matmul(A, x[..., None])[..., 0]


def _reduced_solve(K, rhs):
    """Solve K x = rhs; near convergence K can be numerically singular."""
    try:
        return np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        scale = np.abs(K).max(axis=(-1, -2), keepdims=True)
        return np.linalg.solve(K + 1e-14 * scale * np.eye(K.shape[-1]), rhs)


def solve_arrays(P, q, G, h, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                 polish=True) -> BatchSolution:
    """Solve a batch given as stacked arrays.

    P: (B, n, n), q: (B, n), G: (m, n) or (B, m, n), h: (B, m).  With
    ``polish`` each converged answer is refined on its active set, which
    usually makes it exact to rounding.
    """
    P = np.asarray(P, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    B, n = q.shape
    h = np.asarray(h, dtype=np.float64).reshape(B, -1)
    m = h.shape[1]
    G = np.broadcast_to(np.asarray(G, dtype=np.float64).reshape(-1, m, n) if m else
                        np.zeros((1, 0, n)), (B, m, n))
    if tol <= 0:
        raise ValueError("tol must be positive")

    _cholesky(P, "P")
    y = -np.linalg.solve(P, q[..., None])[..., 0]
    if m == 0:
        rd = np.abs(_mv(P, y) + q).max(axis=-1)
        return BatchSolution(y, np.zeros((B, 0)), np.zeros((B, 0)),
                             np.zeros(B, dtype=int), rd)

    Gt = np.swapaxes(G, -1, -2)
    # starting point: one affine Newton step from (y, 1, 1), then push slacks
    # and multipliers away from zero; far better than a unit start when the
    # feasible set is far from the unconstrained minimizer
    s = np.ones((B, m))
    lam = np.ones((B, m))
    K = P + np.matmul(Gt, G)
    rp = _mv(G, y) + s - h
    rd = _mv(P, y) + q + _mv(Gt, lam)
    dy = _reduced_solve(K, (-rd - _mv(Gt, rp - s))[..., None])[..., 0]
    ds = -rp - _mv(G, dy)
    # with s = lam = 1 the affine multiplier step gives lam + dlam = -ds
    y = y + dy
    lam = np.maximum(np.abs(ds), 1.0)
    s = np.maximum(np.abs(1.0 + ds), 1.0)
    active = np.ones(B, dtype=bool)
    iterations = np.full(B, max_iter, dtype=int)
    residual = np.full(B, np.inf)

    for it in range(max_iter + 1):
        rd = _mv(P, y) + q + _mv(Gt, lam)
        rp = _mv(G, y) + s - h
        comp = s * lam
        res = np.maximum(np.maximum(np.abs(rd).max(-1), np.abs(rp).max(-1)), comp.max(-1))
        residual = np.where(active, res, residual)
        done = active & (res <= tol)
        if polish:
            # once the active set is evident, solve on it exactly; this ends
            # runs that would otherwise stall just above tol on an
            # ill-conditioned reduced system and then drift away
            for i in np.flatnonzero(active & ~done & (res <= POLISH_START)):
                done[i] = _polish(P[i], q[i], G[i], h[i], y, s, lam, residual, i, tol,
                                  strict=True)
        iterations[done] = it
        active &= ~done
        if not active.any() or it == max_iter:
            break

        idx = np.flatnonzero(active)
        Pa, Ga, Gta = P[idx], G[idx], Gt[idx]
        sa, la, rda, rpa, ca = s[idx], lam[idx], rd[idx], rp[idx], comp[idx]
        w = la / sa
        K = Pa + np.matmul(Gta, w[..., None] * Ga)
        mu = ca.mean(-1)

        def newton(rc):
            # rc may carry a trailing axis of right-hand sides
            extra = rc.ndim == 3
            r = rc if extra else rc[..., None]
            rhs = -rda[..., None] - np.matmul(Gta, (w * rpa)[..., None] - r / sa[..., None])
            dy = _reduced_solve(K, rhs)
            ds = -rpa[..., None] - np.matmul(Ga, dy)
            dl = (-r - la[..., None] * ds) / sa[..., None]
            if not extra:
                return dy[..., 0], ds[..., 0], dl[..., 0]
            return dy, ds, dl

        def take(dy, ds, dl):
            # separate primal and dual step lengths: a multiplier near zero
            # must not throttle primal progress toward a far feasible set
            sp = np.minimum(1.0, 0.99 * _step_to_boundary(sa, ds))[:, None]
            sd = np.minimum(1.0, 0.99 * _step_to_boundary(la, dl))[:, None]
            yn, sn, ln = y[idx] + sp * dy, sa + sp * ds, la + sd * dl
            merit = np.maximum(np.abs(_mv(Pa, yn) + q[idx] + _mv(Gta, ln)).max(-1),
                               np.abs(_mv(Ga, yn) + sn - h[idx]).max(-1))
            return yn, sn, ln, merit + (sn * ln).mean(-1)

        dy, ds, dl = newton(ca)
        a_aff = np.minimum(_step_to_boundary(sa, ds), _step_to_boundary(la, dl))
        mu_aff = ((sa + a_aff[:, None] * ds) * (la + a_aff[:, None] * dl)).mean(-1)
        sigma = (mu_aff / mu) ** 3
        centre = (sigma * mu)[:, None]
        # Mehrotra's second-order term can overshoot on a pair where both s and
        # lambda are tiny and make the iterates cycle.  Also try the plain
        # centred direction and keep whichever step lowers the merit more.
        DY, DS, DL = newton(np.stack([ca + ds * dl - centre, ca - centre], axis=-1))
        y1, s1, l1, m1 = take(DY[..., 0], DS[..., 0], DL[..., 0])
        y2, s2, l2, m2 = take(DY[..., 1], DS[..., 1], DL[..., 1])
        pick = (m2 < m1)[:, None]
        y[idx] = np.where(pick, y2, y1)
        s[idx] = np.where(pick, s2, s1)
        lam[idx] = np.where(pick, l2, l1)

    if active.any():
        i = int(np.flatnonzero(active)[0])
        raise QpConvergenceError(float(residual[i]), max_iter, i)

    if polish:
        for i in range(B):
            _polish(P[i], q[i], G[i], h[i], y, s, lam, residual, i, tol)
    slack = h - _mv(G, y)
    return BatchSolution(y, lam, slack, iterations, residual)


def _polish(P, q, G, h, y, s, lam, residual, i, tol, strict=False):
    """Replace an interior-point answer by the exact solution on its active set.

    The active set is guessed as the constraints whose multiplier exceeds the
    slack.  The equality-constrained KKT system on that set is solved
    directly; the result is kept only if it is primal and dual feasible and
    its KKT residual is no worse (with ``strict``, no worse than ``tol``), so
    a wrong guess changes nothing.  Returns whether the answer meets ``tol``.
    """
    A = np.flatnonzero(s[i] < lam[i])
    n, k = P.shape[0], A.size
    if k > n:
        return False
    K = np.zeros((n + k, n + k))
    K[:n, :n] = P
    K[:n, n:] = G[A].T
    K[n:, :n] = G[A]
    rhs = np.concatenate([-q, h[A]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return False
    if not np.all(np.isfinite(sol)):
        return False
    yp = sol[:n]
    lp = np.zeros_like(lam[i])
    lp[A] = sol[n:]
    sp = h - G @ yp
    if lp.min(initial=0.0) < -tol or sp.min(initial=0.0) < -tol:
        return False
    lp = np.maximum(lp, 0.0)
    sp = np.maximum(sp, 0.0)
    # active rows hold with equality by construction; leaving their rounding
    # in the slack would multiply it by possibly large multipliers
    sp[A] = 0.0
    res = max(np.abs(P @ yp + q + G.T @ lp).max(), np.abs(G @ yp + sp - h).max(),
              (sp * lp).max(initial=0.0))
    if res > (tol if strict else residual[i]):
        return False
    y[i], s[i], lam[i], residual[i] = yp, sp, lp, res
    return res <= tol


def solve_qp(inst: QpInstance, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> QpSolution:
    batch = solve_arrays(inst.P[None], inst.q[None], inst.G, inst.h[None], tol, max_iter)
    return batch.item(0)


def solve_batch(instances, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> list[QpSolution]:
    instances = list(instances)
    if not instances:
        return []
    n, m = instances[0].n, instances[0].m
    for i, inst in enumerate(instances):
        if (inst.n, inst.m) != (n, m):
            raise QpError(f"instance has (n, m) = {(inst.n, inst.m)}, expected {(n, m)}", i)
    P = np.stack([inst.P for inst in instances])
    q = np.stack([inst.q for inst in instances])
    G = np.stack([inst.G for inst in instances])
    h = np.stack([inst.h for inst in instances])
    batch = solve_arrays(P, q, G, h, tol, max_iter)
    return [batch.item(i) for i in range(len(batch))]


def kkt_backward_arrays(P, G, h, y, lam, grad_y):
    """Batched adjoint solve.  Returns (grad_P, grad_q, regularized_mask)."""
    B, n = y.shape
    m = lam.shape[1]
    G = np.broadcast_to(np.asarray(G).reshape(-1, m, n) if m else np.zeros((1, 0, n)),
                        (B, m, n))
    K = np.zeros((B, n + m, n + m))
    K[:, :n, :n] = P
    K[:, :n, n:] = np.swapaxes(G, -1, -2) * lam[:, None, :]
    K[:, n:, :n] = G
    idx = np.arange(m)
    K[:, n + idx, n + idx] = _mv(G, y) - h
    rhs = np.concatenate([-grad_y, np.zeros((B, m))], axis=1)
    regularized = np.zeros(B, dtype=bool)
    try:
        sol = np.linalg.solve(K, rhs[..., None])[..., 0]
        bad = ~np.isfinite(sol).all(axis=1)
    except np.linalg.LinAlgError:
        sol = np.zeros_like(rhs)
        bad = np.ones(B, dtype=bool)
    if bad.any():
        Kr = K[bad] + KKT_REGULARIZATION * np.eye(n + m)
        sol[bad] = np.linalg.solve(Kr, rhs[bad][..., None])[..., 0]
        regularized = bad
    dy = sol[:, :n]
    grad_q = dy
    grad_P = 0.5 * (dy[:, :, None] * y[:, None, :] + y[:, :, None] * dy[:, None, :])
    return grad_P, grad_q, regularized


def qp_backward(inst: QpInstance, sol: QpSolution, dL_dy):
    """Gradients of a scalar loss through y*(P, q), holding G and h fixed."""
    gP, gq, reg = kkt_backward_arrays(inst.P[None], inst.G, inst.h[None],
                                      sol.y_star[None], sol.lambda_star[None],
                                      np.asarray(dL_dy, dtype=np.float64)[None])
    sol.diagnostics["kkt_regularized"] = bool(reg[0])
    return gP[0], gq[0]


def qp_layer(P: Tensor, q: Tensor, G, h, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Tape node for a batch of QPs; returns (y tensor of shape (B, n), BatchSolution)."""
    G = np.asarray(G, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    sol = solve_arrays(P.value, q.value, G, h, tol, max_iter)

    def backward(g):
        gP, gq, _ = kkt_backward_arrays(P.value, G, h, sol.y, sol.lam, g)
        return gP, gq

    return custom_op(sol.y, (P, q), backward, "qp"), sol
