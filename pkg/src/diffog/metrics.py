"""Trajectory metrics: derivative magnitude maxima, jerkiness (std) and violations."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np


def derivative_series(actions, dt: float = 1.0, order: int = 1) -> np.ndarray:
    """Forward differences applied ``order`` times, each divided by ``dt``."""
    a = np.asarray(actions, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if order < 1:
        raise ValueError("order must be at least 1")
    if a.shape[0] <= order:
        raise ValueError(f"series of length {a.shape[0]} too short for order {order}")
    for _ in range(order):
        a = np.diff(a, axis=0) / dt
    return a


@dataclass
class MetricReport:
    max_per_dim: list
    std_per_dim: list
    max: float
    std: float
    order: int = 1
    violations: int = 0
    max_violation: float = 0.0

    def row(self) -> dict:
        return {"max": self.max, "std": self.std, "order": self.order,
                "violations": self.violations, "max_violation": self.max_violation}


def summarize(series, bound=None, order: int = 1, tol: float = 1e-6) -> MetricReport:
    """Per-dimension max |value| and population std over time, averaged over dims.

    With ``bound`` (scalar, per-dim (D,), or per-entry (T, D)) entries with
    ``|value| > bound + tol`` are counted as violations.
    """
    s = np.asarray(series, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if s.size == 0:
        raise ValueError("empty series")
    mx = np.abs(s).max(axis=0)
    sd = s.std(axis=0)
    count, worst = 0, 0.0
    if bound is not None:
        b = np.asarray(bound, dtype=np.float64)
        excess = np.abs(s) - b
        count = int((excess > tol).sum())
        worst = float(max(0.0, excess.max()))
    return MetricReport(mx.tolist(), sd.tolist(), float(mx.mean()), float(sd.mean()),
                        order, count, worst)


def aggregate(reports) -> dict:
    """Average per-episode reports; violations are summed."""
    reports = list(reports)
    if not reports:
        return {}
    return {
        "max": float(np.mean([r.max for r in reports])),
        "std": float(np.mean([r.std for r in reports])),
        "violations": int(sum(r.violations for r in reports)),
        "max_violation": float(max(r.max_violation for r in reports)),
        "episodes": len(reports),
    }


def write_csv(path, rows):
    rows = list(rows)
    if not rows:
        open(path, "w").close()
        return
    fields = list(rows[0])
    for r in rows[1:]:
        fields += [k for k in r if k not in fields]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: _num(v) for k, v in row.items()} for row in csv.DictReader(f)]


def _num(v):
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            return v


def write_json(path, data):
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_default)


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")
