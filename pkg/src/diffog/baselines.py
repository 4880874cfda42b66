"""Post-hoc trajectory processors used for comparison.

``clip_greedy`` and ``penalty_optimize`` take the last executed action and a
chunk of selected dimensions ``(T, D_c)`` and return a chunk whose step
differences respect ``lo <= c_k - c_{k-1} <= hi`` (``lo``/``hi`` are per-step
bounds, i.e. ``d_min*dt`` and ``d_max*dt``).  The residual baseline learns an
additive correction under a soft smoothness penalty and gives no guarantee.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .layer import TrainingDiverged
from .nn import MLP, Adam, clip_grad_norm
from .trajectory import SelectionSpec, build_difference, build_selection


def _bounds(lo, hi, shape):
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), shape)
    if np.any(lo >= hi):
        raise ValueError("need lo < hi elementwise")
    return lo, hi


def clip_greedy(prev, seq, lo, hi) -> np.ndarray:
    """Accumulate clipped differences from ``prev``; works on (T, D) or (B, T, D)."""
    seq = np.asarray(seq, dtype=np.float64)
    lo, hi = _bounds(lo, hi, seq.shape[-2:])
    out = np.empty_like(seq)
    last = np.asarray(prev, dtype=np.float64)
    for k in range(seq.shape[-2]):
        last = last + np.clip(seq[..., k, :] - last, lo[k], hi[k])
        out[..., k, :] = last
    return out


@dataclass(frozen=True)
class PenaltyParams:
    eta: float
    tol: float
    max_iter: int

    def __post_init__(self):
        if self.eta <= 0 or self.tol <= 0 or self.max_iter < 1:
            raise ValueError(f"invalid penalty parameters {self}")


PENALTY_PRESETS = {
    "robomimic": PenaltyParams(0.03, 0.004, 10000),
    "push-t": PenaltyParams(0.1, 0.1, 1000),
    "meta-world": PenaltyParams(0.1, 0.05, 1000),
    "aloha": PenaltyParams(0.05, 0.01, 1000),
}


@dataclass
class PenaltyResult:
    chunk: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    violation: np.ndarray


def violations(prev, seq, lo, hi):
    """(v_max, v_min): amounts by which each difference exceeds hi or undercuts lo."""
    seq = np.asarray(seq, dtype=np.float64)
    prev = np.asarray(prev, dtype=np.float64)
    shifted = np.concatenate([prev[..., None, :], seq[..., :-1, :]], axis=-2)
    delta = seq - shifted
    return np.maximum(0.0, delta - hi), np.maximum(0.0, lo - delta)


def penalty_optimize(prev, seq, lo, hi, params: PenaltyParams) -> PenaltyResult:
    """Descend on the constraint violations, warm-started at ``seq``.

    Each iteration recomputes the differences against the sequence shifted by
    one step (``prev`` first) and moves ``c <- c - eta*(v_max - v_min)``.
    Stops once ``||v_max|| + ||v_min|| < tol``; otherwise returns the last
    iterate with ``converged`` false.  Accepts (T, D) or (B, T, D) input.
    """
    seq = np.asarray(seq, dtype=np.float64)
    single = seq.ndim == 2
    c = (seq[None] if single else seq).copy()
    p = np.asarray(prev, dtype=np.float64).reshape(len(c), -1)
    lo, hi = _bounds(lo, hi, c.shape[-2:])
    B = len(c)
    iterations = np.zeros(B, dtype=int)
    norm = np.full(B, np.inf)
    active = np.ones(B, dtype=bool)
    for it in range(params.max_iter + 1):
        vmax, vmin = violations(p[active], c[active], lo, hi)
        total = (np.sqrt((vmax ** 2).sum(axis=(1, 2)))
                 + np.sqrt((vmin ** 2).sum(axis=(1, 2))))
        idx = np.flatnonzero(active)
        norm[idx] = total
        done = total < params.tol
        iterations[idx[done]] = it
        if it == params.max_iter:
            iterations[idx[~done]] = it
        active[idx[done]] = False
        if not active.any() or it == params.max_iter:
            break
        keep = ~done
        c[idx[keep]] -= params.eta * (vmax[keep] - vmin[keep])
    converged = norm < params.tol
    if single:
        return PenaltyResult(c[0], iterations[:1], converged[:1], norm[:1])
    return PenaltyResult(c, iterations, converged, norm)


@dataclass
class ResidualConfig:
    hidden: tuple = (256, 256)
    alpha: float = 1.0
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 64
    grad_clip: float = 1.0
    seed: int = 0
    T_p: int = 16
    D_a: int = 3
    selected: tuple = (0, 1)
    dt: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        self.hidden = tuple(self.hidden)
        self.selected = tuple(self.selected)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["selected"] = list(self.selected)
        return d


class ResidualModel:
    """y = a + MLP(a) on flattened normalized chunks; the last layer starts at zero."""

    def __init__(self, cfg: ResidualConfig, rng=None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        n = cfg.T_p * cfg.D_a
        self.net = MLP((n, *cfg.hidden, n), rng, "residual", "tanh", zero_last=True)
        sel = SelectionSpec(cfg.D_a, cfg.selected)
        self.AS = build_difference(cfg.T_p, sel.D_c, cfg.dt) @ build_selection(sel, cfg.T_p)

    def parameters(self):
        return self.net.parameters()

    def forward_tensor(self, actions):
        a = np.asarray(actions, dtype=np.float64).reshape(len(actions), -1)
        return T.add(a, self.net(a))

    def __call__(self, actions) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.float64)
        single = actions.ndim == 2
        batch = actions[None] if single else actions
        out = self.forward_tensor(batch).value.reshape(batch.shape)
        return out[0] if single else out

    def loss_tensor(self, y, target):
        """Mean over the batch of ||y - a||^2 + alpha/2 * ||A S y||^2."""
        target = np.asarray(target, dtype=np.float64).reshape(y.shape)
        fit = T.tensor_sum(T.square(T.sub(y, target)))
        smooth = T.tensor_sum(T.square(T.matmul(y, self.AS.T)))
        total = T.add(fit, T.scale(smooth, 0.5 * self.cfg.alpha))
        return T.scale(total, 1.0 / y.shape[0])

    def state(self):
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state(self, state):
        for p in self.parameters():
            p.value[...] = state[p.name]


def residual_fit(model: ResidualModel, inputs, targets, steps=None):
    """Train on (input, target) chunk pairs; returns the per-step losses."""
    cfg = model.cfg
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    params = model.parameters()
    opt = Adam(params, cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    losses = []
    for step in range(cfg.steps if steps is None else steps):
        snapshot = [p.value.copy() for p in params]
        idx = rng.choice(len(inputs), size=min(cfg.batch_size, len(inputs)), replace=False)
        opt.zero_grad()
        try:
            L = model.loss_tensor(model.forward_tensor(inputs[idx]), targets[idx])
            T.backward(L)
            finite = all(np.isfinite(p.grad).all() for p in params)
        except (ValueError, FloatingPointError):
            finite = False
        if not finite:
            for p, v in zip(params, snapshot):
                p.value[...] = v
            raise TrainingDiverged(step, losses)
        clip_grad_norm(params, cfg.grad_clip)
        opt.step()
        losses.append(float(L.value))
    return losses


def residual_train(dataset, cfg: ResidualConfig, base_policy=None, steps=None):
    """Fit the residual network; refine-style pairs when ``base_policy`` is given."""
    from .layer import dataset_chunks, refine_pairs

    model = ResidualModel(cfg)
    if base_policy is None:
        inputs = targets = dataset_chunks(dataset, cfg.T_p)
    else:
        inputs, targets = refine_pairs(base_policy, dataset, cfg.T_p)
    losses = residual_fit(model, inputs, targets, steps)
    return model, losses
