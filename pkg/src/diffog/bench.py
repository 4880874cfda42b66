"""Evaluation harness shared by the command line and the acceptance tests.

``evaluate`` rolls a processor out over ``seeds x episodes`` initializations
of a synthetic task and returns one row per episode; ``aggregate_rows``
averages them per setting.
"""
from __future__ import annotations

import numpy as np

from .synth import BasePolicyStub, make_envs, rollout_batch


def episode_row(res, order=1, dt=1.0, phases=None):
    rep = res.report(order, dt)
    row = {"success": int(res.success), "max": rep.max, "std": rep.std,
           "violations": rep.violations, "max_violation": rep.max_violation,
           "mse": res.mse_to_reference()}
    if phases is not None:
        series = res.derivative(order, dt)
        for i, (a, b, v) in enumerate(phases):
            part = series[a:min(b, len(series))]
            if len(part):
                row[f"phase{i}_bound"] = v
                row[f"phase{i}_max"] = float(np.abs(part).max())
                row[f"phase{i}_std"] = float(part.std(axis=0).mean())
    return row


def evaluate(processor, dataset, spec, *, model=None, policy=None, seeds=(0, 1, 2),
             episodes=50, T_p=16, T_a=8, bound=None, schedule=None, alpha=None,
             penalty=None, order=1, diag_trace=None, policy_seed_offset=1000):
    """Per-episode metric rows for ``processor`` on fresh initializations of ``spec``.

    Each seed gets its own environments and its own base-policy noise stream.
    """
    rows = []
    for seed in seeds:
        envs = make_envs(spec, episodes, seed)
        pol = policy if policy is not None else BasePolicyStub()
        if pol.mode == "replay+jerk":
            pol = BasePolicyStub(pol.mode, pol.offset, pol.jerk_amplitude, pol.jerk_period,
                                 seed=policy_seed_offset + seed)
        trace = [] if diag_trace is not None else None
        results = rollout_batch(envs, pol, processor, T_p, T_a, dataset,
                                processor_obj=model, bound=bound, schedule=schedule,
                                penalty=penalty, alpha=alpha, diag_trace=trace)
        if trace is not None:
            diag_trace.extend((seed, t, d) for t, d in trace)
        phases = schedule.phases if schedule is not None else None
        for i, res in enumerate(results):
            row = {"processor": processor, "seed": seed, "episode": i}
            row.update(episode_row(res, order, spec.dt, phases))
            rows.append(row)
    return rows


def aggregate_rows(rows, keys=("processor",)):
    """Mean of numeric columns per group; violations are summed."""
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r.get(k) for k in keys), []).append(r)
    out = []
    for key, rs in groups.items():
        agg = dict(zip(keys, key))
        agg["episodes"] = len(rs)
        for col in rs[0]:
            if col in keys or col in ("seed", "episode"):
                continue
            vals = [r[col] for r in rs if col in r]
            if not vals or not isinstance(vals[0], (int, float, np.floating, np.integer)):
                continue
            if col == "violations":
                agg[col] = int(sum(vals))
            elif col.endswith("_max") or col == "max_violation":
                agg[col] = float(max(vals))
            else:
                agg[col] = float(np.mean(vals))
        if "success" in agg:
            agg["success_rate"] = agg.pop("success")
        out.append(agg)
    return out


def per_seed_success(rows):
    seeds = sorted({r["seed"] for r in rows})
    return {s: float(np.mean([r["success"] for r in rows if r["seed"] == s])) for s in seeds}
