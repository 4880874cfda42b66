"""Synthetic planar reaching tasks, a scripted base policy and chunked rollouts.

Actions are ``(x, y, grip)``: an absolute target position in the unit square
plus a gripper toggle that closes once the motion has finished.  Position is
set directly by the action, so the first difference of the action sequence
is the velocity.  Reference motions follow minimum-jerk profiles between
waypoints and then hold at the goal.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .metrics import derivative_series, summarize

KINDS = ("reach2d", "waypoint-chain", "jerky-replay")
POLICY_MODES = ("replay", "replay+offset", "replay+jerk", "nearest-neighbor")
PROCESSORS = ("none", "diffog", "clip", "penalty", "residual")
D_A = 3
SELECTED = (0, 1)

_DEMO_STREAM = 0
_EVAL_STREAM = 1


@dataclass
class SynthTaskSpec:
    """``jerk_amplitude`` (raw units) corrupts the demonstrations, except for the
    jerky-replay kind where demonstrations stay clean and the amplitude is the
    one its default base policy injects."""

    kind: str = "reach2d"
    horizon: int = 64
    goal_tol: float = 0.02
    jerk_amplitude: float = 0.0
    jerk_period: int = 3
    seed: int = 0
    reach_fraction: float = 0.75
    margin: float = 0.2
    dt: float = 1.0
    waypoints: list | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.jerk_amplitude < 0 or self.jerk_period < 1:
            raise ValueError("jerk amplitude must be >= 0 and period >= 1")
        if not 0 < self.reach_fraction <= 1:
            raise ValueError("reach_fraction must lie in (0, 1]")
        if not 0 <= self.margin < 0.5:
            raise ValueError("margin must lie in [0, 0.5)")
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if self.waypoints is not None:
            w = np.asarray(self.waypoints, dtype=np.float64)
            if w.ndim != 2 or w.shape[1] != 2 or len(w) < 2:
                raise ValueError("waypoints must be a list of at least two (x, y) pairs")
            if np.any(w < 0) or np.any(w > 1):
                raise ValueError("waypoints must lie inside the unit box")

    def to_dict(self):
        return asdict(self)


def min_jerk(tau):
    tau = np.clip(tau, 0.0, 1.0)
    return 10 * tau ** 3 - 15 * tau ** 4 + 6 * tau ** 5


def block_noise(rng, steps, dims, amplitude, period, phase=0):
    """Piecewise-constant uniform noise in [-amplitude, amplitude], blocks of ``period``."""
    if amplitude == 0:
        return np.zeros((steps, dims))
    blocks = (np.arange(steps) + phase) // period
    blocks -= blocks[0]
    values = rng.uniform(-amplitude, amplitude, size=(blocks[-1] + 1, dims))
    return values[blocks]


def _waypoints(spec: SynthTaskSpec, rng):
    if spec.waypoints is not None:
        return np.asarray(spec.waypoints, dtype=np.float64)
    lo, hi = spec.margin, 1.0 - spec.margin
    count = 4 if spec.kind == "waypoint-chain" else 2
    return rng.uniform(lo, hi, size=(count, 2))


def reference_positions(waypoints, horizon, reach_fraction):
    """Positions p_0..p_H; equal-time minimum-jerk segments, then hold."""
    reach = max(1, int(round(reach_fraction * horizon)))
    segs = len(waypoints) - 1
    k = np.arange(horizon + 1)
    u = np.minimum(k / reach, 1.0) * segs
    idx = np.minimum(u.astype(int), segs - 1)
    s = min_jerk(u - idx)[:, None]
    p = waypoints[idx] + (waypoints[idx + 1] - waypoints[idx]) * s
    return p, reach


@dataclass
class Episode:
    obs: np.ndarray
    act: np.ndarray
    ref: np.ndarray
    start: np.ndarray
    goal: np.ndarray
    dt: float

    def get(self, key, default=None):
        return getattr(self, key, default)

    def __getitem__(self, key):
        return getattr(self, key)

    def to_json(self):
        return {"obs": self.obs.tolist(), "act": self.act.tolist(), "ref": self.ref.tolist(),
                "dt": self.dt, "start": self.start.tolist(), "goal": self.goal.tolist()}

    @classmethod
    def from_json(cls, d):
        act = np.asarray(d["act"], dtype=np.float64)
        obs = np.asarray(d["obs"], dtype=np.float64)
        ref = np.asarray(d.get("ref", d["act"]), dtype=np.float64)
        start = np.asarray(d.get("start", obs[0, :2]), dtype=np.float64)
        goal = np.asarray(d.get("goal", ref[-1, :2]), dtype=np.float64)
        return cls(obs, act, ref, start, goal, float(d["dt"]))


def make_episode(spec: SynthTaskSpec, rng, corrupt: bool) -> Episode:
    wp = _waypoints(spec, rng)
    H = spec.horizon
    p, reach = reference_positions(wp, H, spec.reach_fraction)
    grip = (np.arange(1, H + 1) >= reach).astype(float)
    ref = np.column_stack([p[1:], grip])
    act = ref.copy()
    if corrupt:
        act[:, :2] += block_noise(rng, H, 2, spec.jerk_amplitude, spec.jerk_period)
    tau = np.arange(H) / H
    obs = np.column_stack([p[:-1], np.broadcast_to(wp[-1], (H, 2)), tau])
    return Episode(obs, act, ref, wp[0].copy(), wp[-1].copy(), spec.dt)


@dataclass
class DemoDataset:
    episodes: list
    stats: dict
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.episodes)

    @staticmethod
    def compute_stats(episodes):
        acts = np.concatenate([ep.act for ep in episodes])
        return {"min": acts.min(axis=0), "max": acts.max(axis=0)}

    def _scale(self):
        lo = np.asarray(self.stats["min"], dtype=np.float64)
        hi = np.asarray(self.stats["max"], dtype=np.float64)
        half = (hi - lo) / 2
        # a constant dimension maps to 0 with unit scale
        return (hi + lo) / 2, np.where(half > 0, half, 1.0)

    def normalize(self, a):
        mid, half = self._scale()
        return (np.asarray(a, dtype=np.float64) - mid) / half

    def denormalize(self, a):
        mid, half = self._scale()
        return np.asarray(a, dtype=np.float64) * half + mid

    def normalized_episodes(self, key="act"):
        return [self.normalize(ep[key]) for ep in self.episodes]

    def bound_to_raw(self, bound):
        """Per-dimension raw step bound matching a normalized bound on the selected dims."""
        _, half = self._scale()
        sel = list(self.meta.get("selected", SELECTED))
        return np.asarray(bound) * half[sel]


def gen_demos(spec: SynthTaskSpec, n_episodes: int, seed: int | None = None) -> DemoDataset:
    """Minimum-jerk demonstrations, reproducible per seed."""
    seed = spec.seed if seed is None else seed
    corrupt = spec.kind != "jerky-replay" and spec.jerk_amplitude > 0
    episodes = [make_episode(spec, np.random.default_rng([seed, _DEMO_STREAM, i]), corrupt)
                for i in range(n_episodes)]
    if not episodes:
        raise ValueError("need at least one episode")
    meta = {"D_a": D_A, "selected": list(SELECTED), "dt": spec.dt, "task": spec.kind,
            "seed": seed, "spec": spec.to_dict()}
    return DemoDataset(episodes, DemoDataset.compute_stats(episodes), meta)


@dataclass
class BasePolicyStub:
    """Scripted stand-in for a pre-trained chunking policy.

    ``predict`` returns raw ``(T_p, D_a)`` chunks.  Replay modes read the
    reference of the current episode; offsets and jerk noise touch only the
    position dimensions.
    """

    mode: str = "replay"
    offset: float | list = 0.0
    jerk_amplitude: float = 0.0
    jerk_period: int = 3
    seed: int = 0
    dataset: DemoDataset | None = None

    def __post_init__(self):
        if self.mode not in POLICY_MODES:
            raise ValueError(f"mode must be one of {POLICY_MODES}, got {self.mode!r}")
        if self.mode == "nearest-neighbor":
            if self.dataset is None:
                raise ValueError("nearest-neighbor mode needs a dataset")
            self._obs = np.concatenate([ep.obs for ep in self.dataset.episodes])
            self._keys = [(e, t) for e, ep in enumerate(self.dataset.episodes)
                          for t in range(len(ep.obs))]

    @staticmethod
    def _window(seq, t, T_p):
        idx = np.minimum(np.arange(t, t + T_p), len(seq) - 1)
        return np.array(seq[idx], dtype=np.float64)

    def predict(self, obs, ref, t: int, T_p: int, episode: int = 0) -> np.ndarray:
        if self.mode == "nearest-neighbor":
            i = int(np.argmin(((self._obs - obs) ** 2).sum(axis=1)))
            e, s = self._keys[i]
            return self._window(self.dataset.episodes[e].act, s, T_p)
        chunk = self._window(np.asarray(ref), t, T_p)
        if self.mode == "replay+offset":
            chunk[:, list(SELECTED)] += np.asarray(self.offset, dtype=np.float64)
        elif self.mode == "replay+jerk":
            rng = np.random.default_rng([self.seed, episode, t])
            chunk[:, list(SELECTED)] += block_noise(rng, T_p, len(SELECTED),
                                                    self.jerk_amplitude, self.jerk_period, t)
        return chunk

    def to_dict(self):
        return {"mode": self.mode, "offset": np.asarray(self.offset).tolist(),
                "jerk_amplitude": self.jerk_amplitude, "jerk_period": self.jerk_period,
                "seed": self.seed}


def default_policy(spec: SynthTaskSpec, seed=0) -> BasePolicyStub:
    if spec.kind == "jerky-replay":
        return BasePolicyStub("replay+jerk", jerk_amplitude=spec.jerk_amplitude,
                              jerk_period=spec.jerk_period, seed=seed)
    return BasePolicyStub("replay", seed=seed)


class ReachEnv:
    """Position-controlled point in the unit square."""

    def __init__(self, spec: SynthTaskSpec, index: int, seed: int | None = None):
        self.spec = spec
        self.index = index
        seed = spec.seed if seed is None else seed
        ep = make_episode(spec, np.random.default_rng([seed, _EVAL_STREAM, index]), False)
        self.ref = ep.ref
        self.start = ep.start
        self.goal = ep.goal
        self.reset()

    def reset(self):
        self.t = 0
        self.pos = self.start.copy()
        self.left_box = False
        return self.observe()

    def observe(self):
        return np.concatenate([self.pos, self.goal, [self.t / self.spec.horizon]])

    def step(self, action):
        self.pos = np.asarray(action[:2], dtype=np.float64).copy()
        self.left_box |= bool(np.any(self.pos < 0) or np.any(self.pos > 1))
        self.t += 1
        return self.observe()

    @property
    def done(self):
        return self.t >= self.spec.horizon

    def success(self) -> bool:
        return (not self.left_box and
                float(np.linalg.norm(self.pos - self.goal)) <= self.spec.goal_tol)


def make_envs(spec: SynthTaskSpec, n: int, seed: int | None = None):
    return [ReachEnv(spec, i, seed) for i in range(n)]


@dataclass
class RolloutResult:
    actions: np.ndarray        # executed raw actions (H, D_a)
    normalized: np.ndarray     # executed normalized actions (H, D_a)
    start: np.ndarray          # normalized start action used as the first link
    bounds: np.ndarray | None  # per-step bound on each executed change (H, D_c)
    reference: np.ndarray      # normalized reference actions (H, D_a)
    success: bool

    def derivative(self, order=1, dt=1.0):
        sel = list(SELECTED)
        seq = np.vstack([self.start[None], self.normalized[:, sel]])
        return derivative_series(seq, dt, order)

    def report(self, order=1, dt=1.0, tol=1e-6):
        b = None if self.bounds is None or order != 1 else self.bounds / dt
        if b is not None and not np.all(np.isfinite(b)):
            b = None
        return summarize(self.derivative(order, dt), b, order, tol)

    def mse_to_reference(self):
        sel = list(SELECTED)
        d = self.normalized[:, sel] - self.reference[:, sel]
        return float((d ** 2).sum(axis=1).mean())


def _step_bounds(processor, processor_obj, bound, schedule, t, T_p, D_c):
    if schedule is not None:
        return schedule.window(t, T_p, D_c)
    if bound is None and processor == "diffog":
        bound = processor_obj.cfg.bound
    if bound is None:
        return None
    return np.broadcast_to(np.asarray(bound, dtype=np.float64), (T_p, D_c)).copy()


def rollout_batch(envs, policy, processor: str, T_p: int, T_a: int, stats_from,
                  processor_obj=None, bound=None, schedule=None, penalty=None, alpha=None,
                  diag_trace=None):
    """Run environments in lock-step, replanning every ``T_a`` steps.

    Processors see normalized chunks; ``prev`` is the last executed normalized
    position (the start position before the first step).  ``stats_from`` is a
    ``DemoDataset`` providing the normalization.  When ``diag_trace`` is a list
    and the processor is the layer, ``(step, mean diagonality of Q)`` is
    appended at every replan.
    """
    if processor not in PROCESSORS:
        raise ValueError(f"processor must be one of {PROCESSORS}, got {processor!r}")
    if not 1 <= T_a <= T_p:
        raise ValueError("need 1 <= T_a <= T_p")
    if processor in ("diffog", "residual") and processor_obj is None:
        raise ValueError(f"processor {processor!r} needs a model")
    if processor == "penalty" and penalty is None:
        raise ValueError("penalty processor needs PenaltyParams")
    from .baselines import clip_greedy, penalty_optimize

    sel = list(SELECTED)
    D_c = len(sel)
    H = envs[0].spec.horizon
    if H < T_p:
        raise ValueError(f"horizon {H} shorter than chunk length {T_p}")
    B = len(envs)
    ds = stats_from
    for env in envs:
        env.reset()
    start_full = np.array([np.concatenate([env.start, env.ref[0, 2:]]) for env in envs])
    prev = ds.normalize(start_full)[:, sel]
    start = prev.copy()
    executed = np.zeros((B, H, D_A))
    step_bounds = np.full((B, H, D_c), np.inf)
    t = 0
    while t < H:
        raw = np.array([policy.predict(env.observe(), env.ref, t, T_p, episode=env.index)
                        for env in envs])
        a = ds.normalize(raw)
        b = _step_bounds(processor, processor_obj, bound, schedule, t, T_p, D_c)
        if processor == "diffog":
            y = processor_obj(a, prev=prev, bound=b, alpha=alpha)
            if diag_trace is not None:
                from .qgen import diagonality
                Q = processor_obj.q_tensor(a).value
                diag_trace.append((t, float(np.mean([diagonality(q) for q in Q]))))
        elif processor == "residual":
            y = processor_obj(a)
        elif processor in ("clip", "penalty"):
            y = a.copy()
            if processor == "clip":
                y[..., sel] = clip_greedy(prev, a[..., sel], -b, b)
            else:
                y[..., sel] = penalty_optimize(prev, a[..., sel], -b, b, penalty).chunk
        else:
            y = a
        n_exec = min(T_a, H - t)
        out = ds.denormalize(y[:, :n_exec])
        for i, env in enumerate(envs):
            for k in range(n_exec):
                env.step(out[i, k])
        executed[:, t:t + n_exec] = y[:, :n_exec]
        if b is not None:
            step_bounds[:, t:t + n_exec] = b[:n_exec]
        prev = y[:, n_exec - 1, sel]
        t += n_exec
    results = []
    for i, env in enumerate(envs):
        bnds = None if processor in ("none", "residual") and bound is None and schedule is None \
            else step_bounds[i]
        results.append(RolloutResult(ds.denormalize(executed[i]), executed[i], start[i], bnds,
                                     ds.normalize(env.ref), env.success()))
    return results


def rollout(env, policy, processor, T_p, T_a, stats_from=None, processor_obj=None, **kw):
    """Single-environment convenience wrapper around ``rollout_batch``."""
    if stats_from is None:
        raise ValueError("rollout needs a dataset for normalization statistics")
    res = rollout_batch([env], policy, processor, T_p, T_a, stats_from,
                        processor_obj=processor_obj, **kw)[0]
    return res, res.success
