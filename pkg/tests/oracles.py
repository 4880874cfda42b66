"""Independent reference computations used only by the tests.

None of these share code with the package: the QP references are a brute
force enumeration and a textbook primal active-set method, the derivative
references are plain loops and central differences.
"""
from __future__ import annotations

import itertools

import numpy as np


def enumerate_box_qp(P, q, lo, hi):
    """Exact minimizer of 1/2 y'Py + q'y over lo <= y <= hi by trying all 3^n patterns.

    Each variable is free, at its lower bound or at its upper bound.  The
    pattern whose stationary point is feasible with correctly signed
    multipliers is the unique optimum.  Returns (y, pattern).
    """
    n = len(q)
    best = None
    for pattern in itertools.product((0, -1, 1), repeat=n):
        pat = np.array(pattern)
        free = pat == 0
        y = np.where(pat < 0, lo, np.where(pat > 0, hi, 0.0))
        if free.any():
            rhs = -q[free] - P[np.ix_(free, ~free)] @ y[~free]
            y[free] = np.linalg.solve(P[np.ix_(free, free)], rhs)
        if np.any(y < lo - 1e-10) or np.any(y > hi + 1e-10):
            continue
        grad = P @ y + q
        # at a lower bound the gradient must point inward (>= 0), at an upper bound <= 0
        if np.any(grad[pat < 0] < -1e-10) or np.any(grad[pat > 0] > 1e-10):
            continue
        val = 0.5 * y @ P @ y + q @ y
        if best is None or val < best[0]:
            best = (val, y, pat)
    return best[1], best[2]


def active_set_qp(P, q, G, h, x0=None, max_iter=500):
    """Primal active-set method for min 1/2 x'Px + q'x s.t. Gx <= h (P positive definite).

    ``x0`` must be feasible; defaults to the origin.  Returns (x, lam).
    """
    n = len(q)
    m = len(h)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if np.any(G @ x > h + 1e-12):
        raise ValueError("starting point is infeasible")
    W = [i for i in range(m) if abs(G[i] @ x - h[i]) <= 1e-13 * max(1.0, abs(h[i]))]
    W = _independent(G, W)
    scale = max(1.0, np.abs(P).max())
    for _ in range(max_iter):
        g = P @ x + q
        k = len(W)
        K = np.zeros((n + k, n + k))
        K[:n, :n] = P
        if k:
            K[:n, n:] = G[W].T
            K[n:, :n] = G[W]
        sol = np.linalg.solve(K, np.concatenate([-g, np.zeros(k)]))
        p, lam_w = sol[:n], sol[n:]
        if np.abs(p).max(initial=0.0) <= 1e-14 * scale * max(1.0, np.abs(x).max()):
            if k == 0 or lam_w.min() >= -1e-14 * scale:
                lam = np.zeros(m)
                lam[W] = np.maximum(lam_w, 0.0)
                # final exact re-solve on the identified set
                return _equality_solve(P, q, G, h, W), lam
            W.pop(int(np.argmin(lam_w)))
            continue
        Gp = G @ p
        step, block = 1.0, None
        for i in range(m):
            if i in W or Gp[i] <= 1e-15:
                continue
            t = (h[i] - G[i] @ x) / Gp[i]
            if t < step:
                step, block = t, i
        x = x + step * p
        if block is not None:
            W.append(block)
    raise RuntimeError("active-set method did not terminate")


def _independent(G, W):
    keep = []
    for i in W:
        if np.linalg.matrix_rank(G[keep + [i]]) == len(keep) + 1:
            keep.append(i)
    return keep


def _equality_solve(P, q, G, h, W):
    n, k = len(q), len(W)
    K = np.zeros((n + k, n + k))
    K[:n, :n] = P
    if k:
        K[:n, n:] = G[W].T
        K[n:, :n] = G[W]
    return np.linalg.solve(K, np.concatenate([-q, h[W]]))[:n]


def kkt_violation(P, q, G, h, y, lam):
    """Largest violation among stationarity, feasibility, dual sign and complementarity."""
    slack = h - G @ y
    return max(np.abs(P @ y + q + G.T @ lam).max(), max(0.0, -slack.min(initial=0.0)),
               max(0.0, -lam.min(initial=0.0)), np.abs(slack * lam).max(initial=0.0))


def central_difference(f, x, step):
    """Gradient of scalar f at array x by central differences."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x)
        x[idx] = orig - step
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * step)
    return g


def loop_differences(c, dt):
    c = np.asarray(c, dtype=float)
    return np.array([[(c[k + 1][d] - c[k][d]) / dt for d in range(c.shape[1])]
                     for k in range(len(c) - 1)])


def loop_smoothness(y, T_p, D_a, selected, dt):
    total = 0.0
    for k in range(T_p - 1):
        for d in selected:
            total += ((y[(k + 1) * D_a + d] - y[k * D_a + d]) / dt) ** 2
    return total


def random_spd(rng, n, shift=0.1):
    M = rng.normal(size=(n, n))
    return M.T @ M + shift * np.eye(n)
