"""The trainable smoothing layer: Q generator + trajectory QP + KKT backward.

A ``DiffogModel`` maps a batch of normalized action chunks ``(B, T_p, D_a)``
to optimized chunks.  Training minimizes the mean squared distance between
the optimized chunk and a target chunk, either the chunk itself (dataset
mode) or a demonstration chunk paired with a frozen base policy's output
(refine mode).
"""
from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import Adam, clip_grad_norm
from .qgen import EPSILON, EncoderConfig, make_generator
from .qp import DEFAULT_MAX_ITER, DEFAULT_TOL, FEAS_TOL, qp_layer
from .trajectory import (ConstraintSpec, SelectionSpec, constraint_bounds, constraint_rows,
                         passthrough_mask, smoothing_matrix)

VARIANTS = ("transformer", "matrix_learning", "static")


@dataclass
class DiffogConfig:
    variant: str = "transformer"
    alpha: float = 4.0
    bound: float = 0.1          # symmetric per-step bound on normalized actions
    T_p: int = 16
    D_a: int = 3
    selected: tuple = (0, 1)
    dt: float = 1.0
    passthrough: bool = False
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    lr: float = 1e-4
    batch_size: int = 64
    grad_clip: float = 1.0
    steps: int = 500
    warmup: int = 50            # linear learning-rate ramp, in steps
    weight_decay: float = 0.0
    epsilon: float = EPSILON
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if np.any(np.asarray(self.bound) <= 0):
            raise ValueError("bound must be positive")
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.selected = tuple(self.selected)
        self.encoder.T_p = self.T_p
        self.encoder.D_a = self.D_a

    @classmethod
    def manipulation(cls, **kw):
        """alpha 4 with per-step bound 0.1 (end-effector pose tasks)."""
        return cls(**{"alpha": 4.0, "bound": 0.1, **kw})

    @classmethod
    def planar(cls, **kw):
        """alpha 1 with per-step bound 0.05 (planar position tasks)."""
        return cls(**{"alpha": 1.0, "bound": 0.05, **kw})

    @property
    def selection(self) -> SelectionSpec:
        return SelectionSpec(self.D_a, self.selected)

    @property
    def n(self) -> int:
        return self.T_p * self.D_a

    def constraints(self, bound=None) -> ConstraintSpec:
        """Symmetric constraint spec; ``bound`` is a scalar, (D_c,) or per-step (T_p, D_c)."""
        bound = self.bound if bound is None else bound
        b = np.asarray(bound, dtype=np.float64)
        if b.ndim < 2:
            b = np.broadcast_to(b, (len(self.selected),))
        return ConstraintSpec(-b / self.dt, b / self.dt)

    def to_dict(self):
        d = asdict(self)
        d["selected"] = list(self.selected)
        d["bound"] = np.asarray(self.bound).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        return cls(**d)


@dataclass
class TrainRecord:
    step: int
    loss: float
    activity: float
    wall_time: float


class TrainingDiverged(RuntimeError):
    def __init__(self, step, records):
        super().__init__(f"loss became non-finite at step {step}; parameters restored")
        self.step = step
        self.records = records


class DiffogModel:
    def __init__(self, cfg: DiffogConfig, rng=None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.generator = make_generator(cfg.variant, cfg.encoder, rng, cfg.epsilon)
        sel = cfg.selection
        self.H = smoothing_matrix(cfg.T_p, sel, cfg.dt)
        mask = passthrough_mask(cfg.T_p, sel)
        self._keep = np.outer(~mask, ~mask).astype(float)
        self._pass = np.diag(mask.astype(float))

    def parameters(self):
        return self.generator.parameters()

    @property
    def trainable(self) -> bool:
        return bool(self.parameters())

    def q_tensor(self, actions, training=False, rng=None):
        Q = self.generator(actions, training, rng)
        if self.cfg.passthrough:
            Q = T.add(T.mul(Q, self._keep), self._pass)
        return Q

    def problem(self, B, prev=None, bound=None, alpha=None):
        """Constraint rows G, right-hand sides h (B, m) and the smoothing weight."""
        cfg = self.cfg
        sel = cfg.selection
        cons = cfg.constraints(bound)
        link = prev is not None
        G = constraint_rows(cfg.T_p, sel, cfg.dt, link=link)
        if link:
            h = constraint_bounds(cfg.T_p, sel, cfg.dt, cons, link=True,
                                  prev=np.asarray(prev, dtype=np.float64).reshape(B, -1))
        else:
            h = np.broadcast_to(constraint_bounds(cfg.T_p, sel, cfg.dt, cons), (B, G.shape[0]))
        return G, h, cfg.alpha if alpha is None else alpha

    def forward_tensor(self, actions, training=False, rng=None, prev=None, bound=None,
                       alpha=None):
        """Optimized chunks as a (B, n) tensor plus the raw batch solution."""
        actions = np.asarray(actions, dtype=np.float64)
        B = actions.shape[0]
        G, h, alpha = self.problem(B, prev, bound, alpha)
        P = T.add(self.q_tensor(actions, training, rng), alpha * self.H)
        q = T.tensor(-actions.reshape(B, -1))
        return qp_layer(P, q, G, h, self.cfg.tol, self.cfg.max_iter)

    def __call__(self, actions, prev=None, bound=None, alpha=None) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.float64)
        single = actions.ndim == 2
        batch = actions[None] if single else actions
        if prev is not None and single:
            prev = np.asarray(prev)[None]
        y, _ = self.forward_tensor(batch, prev=prev, bound=bound, alpha=alpha)
        out = y.value.reshape(batch.shape)
        return out[0] if single else out

    def state(self) -> dict:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state(self, state: dict):
        params = {p.name: p for p in self.parameters()}
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.value.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} "
                                 f"vs model {p.value.shape}")
            p.value[...] = state[name]


def forward(model: DiffogModel, actions, prev_action=None, bound=None, alpha=None):
    """Evaluation-mode optimized chunk(s); ``bound`` may be a per-step schedule slice."""
    return model(actions, prev_action, bound, alpha)


def loss(y_star, target) -> float:
    """Squared Euclidean distance, averaged over the batch."""
    y = np.asarray(y_star, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if y.shape != t.shape:
        raise ValueError(f"shapes differ: {y.shape} vs {t.shape}")
    if y.ndim <= 1:
        return float(((y - t) ** 2).sum())
    return float(((y - t) ** 2).reshape(len(y), -1).sum(axis=1).mean())


def loss_tensor(y: T.Tensor, target) -> T.Tensor:
    target = np.asarray(target, dtype=np.float64).reshape(y.shape)
    d = T.sub(y, target)
    return T.scale(T.tensor_sum(T.square(d)), 1.0 / y.shape[0])


def train_pairs(model: DiffogModel, inputs, targets, steps=None, log_every=0,
                callback=None) -> list[TrainRecord]:
    """Minibatch Adam on (input chunk, target chunk) pairs of shape (N, T_p, D_a)."""
    cfg = model.cfg
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.shape != targets.shape:
        raise ValueError(f"inputs {inputs.shape} and targets {targets.shape} differ")
    if not model.trainable:
        raise ValueError(f"variant {cfg.variant!r} has nothing to train")
    steps = cfg.steps if steps is None else steps
    params = model.parameters()
    opt = Adam(params, cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    records = []
    start = time.perf_counter()
    for step in range(steps):
        snapshot = [p.value.copy() for p in params]
        idx = rng.choice(len(inputs), size=min(cfg.batch_size, len(inputs)), replace=False)
        opt.zero_grad()
        try:
            y, sol = model.forward_tensor(inputs[idx], training=True, rng=rng)
            L = loss_tensor(y, targets[idx])
            T.backward(L)
            value = float(L.value)
            finite = np.isfinite(value) and all(np.isfinite(p.grad).all() for p in params)
        except (ValueError, FloatingPointError):
            finite = False
        if not finite:
            for p, v in zip(params, snapshot):
                p.value[...] = v
            raise TrainingDiverged(step, records)
        clip_grad_norm(params, cfg.grad_clip)
        # Adam's first steps move every weight by the full lr in a coherent
        # pattern, which perturbs Q far more than later steps do
        opt.lr = cfg.lr * min(1.0, (step + 1) / max(cfg.warmup, 1))
        opt.step()
        activity = float((sol.slack <= FEAS_TOL).mean()) if sol.slack.size else 0.0
        rec = TrainRecord(step, value, activity, time.perf_counter() - start)
        records.append(rec)
        if callback is not None:
            callback(rec, model)
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  loss {value:.6f}  active {activity:.3f}")
    return records


def dataset_chunks(dataset, T_p: int, key="act") -> np.ndarray:
    """All length-T_p windows of normalized actions, shape (N, T_p, D_a)."""
    out = []
    for ep in dataset.normalized_episodes(key):
        for t in range(len(ep) - T_p + 1):
            out.append(ep[t:t + T_p])
    return np.asarray(out)


def train_dataset(dataset, cfg: DiffogConfig, model=None, **kw):
    """Dataset mode: each demonstration chunk is both input and target."""
    model = DiffogModel(cfg) if model is None else model
    chunks = dataset_chunks(dataset, cfg.T_p)
    return model, train_pairs(model, chunks, chunks, **kw)


def refine_pairs(base_policy, dataset, T_p: int):
    """(base output, demonstration) chunk pairs in normalized units.

    The base policy is queried without any gradient path, so it stays frozen.
    """
    inputs, targets = [], []
    acts = dataset.normalized_episodes("act")
    for e, ep in enumerate(dataset.episodes):
        ref = ep.get("ref", ep["act"])
        for t in range(len(ep["act"]) - T_p + 1):
            raw = base_policy.predict(np.asarray(ep["obs"][t]), ref, t, T_p, episode=e)
            inputs.append(dataset.normalize(raw))
            targets.append(acts[e][t:t + T_p])
    return np.asarray(inputs), np.asarray(targets)


def train_refine(base_policy, dataset, cfg: DiffogConfig, model=None, **kw):
    """Refine mode: inputs are frozen base-policy outputs, targets are demonstrations."""
    model = DiffogModel(cfg) if model is None else model
    inputs, targets = refine_pairs(base_policy, dataset, cfg.T_p)
    return model, train_pairs(model, inputs, targets, **kw)


@dataclass
class BoundSchedule:
    """Piecewise-constant per-step bounds: phases of (start, stop, bound)."""

    phases: list

    def __post_init__(self):
        self.phases = [(int(a), int(b), float(v)) for a, b, v in self.phases]
        if not self.phases or self.phases[0][0] != 0:
            raise ValueError("schedule must start at step 0")
        for (a, b, v), nxt in zip(self.phases, self.phases[1:] + [None]):
            if b <= a or v <= 0:
                raise ValueError(f"bad phase ({a}, {b}, {v})")
            if nxt is not None and nxt[0] != b:
                raise ValueError("phases must be contiguous and non-overlapping")

    @classmethod
    def constant(cls, bound, horizon):
        return cls([(0, horizon, bound)])

    @classmethod
    def parse(cls, text: str, horizon: int):
        """``"0.05:40,0.1:40,0.2:40,0.3:rest"`` into phases covering ``horizon``."""
        phases, start = [], 0
        for item in text.split(","):
            value, length = item.split(":")
            stop = horizon if length.strip() == "rest" else start + int(length)
            phases.append((start, stop, float(value)))
            start = stop
        if start < horizon:
            raise ValueError(f"schedule covers {start} steps, horizon is {horizon}")
        return cls(phases)

    @property
    def horizon(self) -> int:
        return self.phases[-1][1]

    def bound_at(self, t: int) -> float:
        """Bound on the change into step ``t``; steps past the end use the last phase."""
        for a, b, v in self.phases:
            if a <= t < b:
                return v
        return self.phases[-1][2]

    def window(self, t0: int, T_p: int, D_c: int) -> np.ndarray:
        """(T_p, D_c) bounds for a chunk planned at ``t0``; row k bounds the step into t0+k."""
        b = np.array([self.bound_at(t0 + k) for k in range(T_p)])
        return np.repeat(b[:, None], D_c, axis=1)

    def phase_of(self, t: int) -> int:
        for i, (a, b, _) in enumerate(self.phases):
            if a <= t < b:
                return i
        return len(self.phases) - 1


def rollout_infer(base_policy, model: DiffogModel, env, schedule=None, exec_horizon=8,
                  **kw):
    """Receding-horizon execution with the layer linking each chunk to the last action."""
    from .synth import rollout
    return rollout(env, base_policy, "diffog", model.cfg.T_p, exec_horizon,
                   processor_obj=model, schedule=schedule, **kw)


def clone(model: DiffogModel) -> DiffogModel:
    return copy.deepcopy(model)
