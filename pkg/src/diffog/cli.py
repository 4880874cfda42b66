"""Command line front end: gen-data, train, eval, compare, report.

Every command writes the exact configuration it ran with to
``<out>/config.json``.  ``--config FILE`` loads a JSON object whose keys are
the long option names (dashes or underscores); explicit flags win.  The
``DIFFOG_SEED`` environment variable overrides ``--seed``.

Exit codes: 0 success, 2 configuration error, 3 convergence failure or
divergence, 4 missing artifact.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_MISSING = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _add_common(p, out_required=True):
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=out_required, help="output directory")


def _add_task(p):
    p.add_argument("--task", choices=["reach2d", "waypoint-chain", "jerky-replay"])
    p.add_argument("--horizon", type=int)
    p.add_argument("--goal-tol", type=float)
    p.add_argument("--jerk-amplitude", type=float)
    p.add_argument("--jerk-period", type=int)


def _add_eval_common(p):
    p.add_argument("--data", required=True, help="dataset directory (normalization stats)")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    p.add_argument("--T-a", dest="T_a", type=int, default=8)
    p.add_argument("--base", choices=["replay", "replay+offset", "replay+jerk",
                                      "nearest-neighbor"])
    p.add_argument("--offset", type=float, default=0.05)
    p.add_argument("--order", type=int, default=1)
    _add_task(p)


def build_parser():
    parser = argparse.ArgumentParser(prog="diffog", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic demonstrations")
    _add_common(g)
    _add_task(g)
    g.add_argument("--episodes", type=int, default=30)

    t = sub.add_parser("train", help="train the layer or the residual baseline")
    _add_common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--mode", default="dataset",
                   choices=["dataset", "refine", "residual", "matrix", "static"])
    t.add_argument("--alpha", type=float, default=4.0)
    t.add_argument("--bound", type=float, default=0.1)
    t.add_argument("--T-p", dest="T_p", type=int, default=16)
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--grad-clip", type=float, default=1.0)
    t.add_argument("--warmup", type=int, default=50, help="learning-rate ramp length in steps")
    t.add_argument("--embed-dim", type=int, default=256)
    t.add_argument("--ff-dim", type=int, default=256)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--dropout", type=float, default=0.1)
    t.add_argument("--hidden", type=_ints, default=[256, 256], help="residual MLP widths")
    t.add_argument("--passthrough", action="store_true",
                   help="keep unselected dimensions out of the optimization")
    t.add_argument("--base", choices=["replay", "replay+offset", "replay+jerk",
                                      "nearest-neighbor"])
    t.add_argument("--offset", type=float, default=0.05)
    t.add_argument("--jerk-amplitude", type=float)
    t.add_argument("--jerk-period", type=int, default=3)

    e = sub.add_parser("eval", help="roll out a checkpoint and write metrics and plots")
    _add_common(e)
    _add_eval_common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--sweep-alpha", type=_floats)
    e.add_argument("--sweep-bound", type=_floats)
    e.add_argument("--schedule", help='phases like "0.05:40,0.1:40,0.2:40,0.3:rest"')

    c = sub.add_parser("compare", help="side-by-side table of all processors")
    _add_common(c)
    _add_eval_common(c)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--residual-checkpoint")
    c.add_argument("--bound", type=float)
    c.add_argument("--penalty", default="robomimic",
                   help="preset name (robomimic, push-t, meta-world, aloha) or eta,tol,max_iter")
    c.add_argument("--format", choices=["csv", "json", "both"], default="both")

    r = sub.add_parser("report", help="regenerate plots and a markdown summary from run dirs")
    _add_common(r)
    r.add_argument("--runs", nargs="+", required=True)
    return parser


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"missing config file {args.config}")
        with open(args.config) as f:
            cfg = json.load(f)
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        values = {}
        for key, value in cfg.items():
            dest = key.replace("-", "_")
            if dest not in known:
                raise ConfigError(f"unknown config key {key!r} for {args.command}")
            values[dest] = value
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    env_seed = os.environ.get("DIFFOG_SEED")
    if env_seed is not None:
        try:
            args.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"DIFFOG_SEED must be an integer, got {env_seed!r}") from None
    return args


def _archive(args):
    os.makedirs(args.out, exist_ok=True)
    cfg = {k: v for k, v in vars(args).items() if k != "config"}
    with open(os.path.join(args.out, "config.json"), "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)


def _task_spec(args, dataset=None):
    from .synth import SynthTaskSpec

    base = dict(dataset.meta.get("spec", {})) if dataset is not None else {}
    base.pop("waypoints", None)
    for name, key in (("task", "kind"), ("horizon", "horizon"), ("goal_tol", "goal_tol"),
                      ("jerk_amplitude", "jerk_amplitude"), ("jerk_period", "jerk_period")):
        value = getattr(args, name, None)
        if value is not None:
            base[key] = value
    base["seed"] = args.seed
    try:
        return SynthTaskSpec(**base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _policy(args, spec, dataset, default_jerk=None):
    from .synth import BasePolicyStub

    mode = args.base or ("replay+jerk" if spec.kind == "jerky-replay" else "replay")
    amp = getattr(args, "jerk_amplitude", None)
    if amp is None:
        amp = spec.jerk_amplitude if default_jerk is None else default_jerk
    return BasePolicyStub(mode, offset=args.offset, jerk_amplitude=amp,
                          jerk_period=getattr(args, "jerk_period", None) or spec.jerk_period,
                          seed=args.seed, dataset=dataset if mode == "nearest-neighbor" else None)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    from .io import file_digest, save_dataset
    from .metrics import derivative_series, summarize
    from .synth import gen_demos

    spec = _task_spec(args)
    if args.episodes < 1:
        raise ConfigError("--episodes must be positive")
    ds = gen_demos(spec, args.episodes, args.seed)
    try:
        save_dataset(ds, args.out)
    except OSError as exc:
        raise ConfigError(f"cannot write dataset to {args.out}: {exc}") from None
    _archive(args)
    sel = list(ds.meta["selected"])
    reps = [summarize(derivative_series(a[:, sel], spec.dt, 1))
            for a in ds.normalized_episodes("act")]
    digest = file_digest(os.path.join(args.out, "episodes.jsonl"),
                         os.path.join(args.out, "stats.json"))
    print(f"episodes: {len(ds)}")
    print(f"task: {spec.kind}  horizon: {spec.horizon}  seed: {args.seed}")
    print(f"velocity max (mean): {np.mean([r.max for r in reps]):.6f}")
    print(f"velocity std (mean): {np.mean([r.std for r in reps]):.6f}")
    print(f"sha256: {digest}")
    return EXIT_OK


def cmd_train(args):
    from .baselines import ResidualConfig, residual_fit, ResidualModel
    from .io import load_dataset, save_checkpoint
    from .layer import (DiffogConfig, DiffogModel, dataset_chunks, refine_pairs,
                        train_pairs)
    from .metrics import write_csv
    from .qgen import EncoderConfig, diagonality

    if args.mode == "static":
        print("static variant: Q = I, nothing to train")
        return EXIT_OK
    ds = load_dataset(args.data)
    spec = _task_spec(args, ds)
    _archive(args)
    refine = args.mode == "refine" or (args.mode in ("matrix", "residual") and args.base)
    if refine:
        default_jerk = spec.jerk_amplitude if spec.jerk_amplitude > 0 else 0.03
        policy = _policy(args, spec, ds, default_jerk)
        inputs, targets = refine_pairs(policy, ds, args.T_p)
    else:
        inputs = targets = dataset_chunks(ds, args.T_p)
    if len(inputs) == 0:
        raise ConfigError(f"episodes shorter than the chunk length {args.T_p}")
    D_a = int(ds.meta.get("D_a", inputs.shape[-1]))
    selected = tuple(ds.meta.get("selected", (0, 1)))
    out_ckpt = os.path.join(args.out, "checkpoint.npz")

    if args.mode == "residual":
        cfg = ResidualConfig(hidden=tuple(args.hidden), alpha=args.alpha, lr=args.lr,
                             steps=args.steps, batch_size=args.batch_size,
                             grad_clip=args.grad_clip, seed=args.seed, T_p=args.T_p,
                             D_a=D_a, selected=selected, dt=spec.dt)
        model = ResidualModel(cfg)
        losses = residual_fit(model, inputs, targets)
        write_csv(os.path.join(args.out, "train.csv"),
                  [{"step": i, "loss": v} for i, v in enumerate(losses)])
        save_checkpoint(out_ckpt, "residual", cfg.to_dict(), model.state(), ds.stats)
        print(f"residual: final loss {losses[-1]:.6f}; wrote {out_ckpt}")
        return EXIT_OK

    try:
        enc = EncoderConfig(args.embed_dim, args.ff_dim, args.heads, args.layers, args.dropout,
                            args.T_p, D_a)
        cfg = DiffogConfig(variant="matrix_learning" if args.mode == "matrix" else "transformer",
                           alpha=args.alpha, bound=args.bound, T_p=args.T_p, D_a=D_a,
                           selected=selected, dt=spec.dt, passthrough=args.passthrough,
                           lr=args.lr, batch_size=args.batch_size, grad_clip=args.grad_clip,
                           steps=args.steps, warmup=args.warmup, seed=args.seed, encoder=enc)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    model = DiffogModel(cfg)
    probe = inputs[:8]
    rows = []

    def log(rec, m):
        row = {"step": rec.step, "loss": rec.loss, "activity": rec.activity,
               "wall_time": rec.wall_time}
        if rec.step % 10 == 0 or rec.step == cfg.steps - 1:
            row["diagonality"] = float(np.mean([diagonality(q) for q in m.q_tensor(probe).value]))
        rows.append(row)

    from .layer import TrainingDiverged
    try:
        train_pairs(model, inputs, targets, callback=log)
    except TrainingDiverged:
        write_csv(os.path.join(args.out, "train.csv"), rows)
        save_checkpoint(out_ckpt, "diffog", cfg.to_dict(), model.state(), ds.stats,
                        {"diverged": True})
        raise
    write_csv(os.path.join(args.out, "train.csv"), rows)
    save_checkpoint(out_ckpt, "diffog", cfg.to_dict(), model.state(), ds.stats,
                    {"mode": "refine" if refine else "dataset"})
    print(f"{cfg.variant}: loss {rows[0]['loss']:.6f} -> {rows[-1]['loss']:.6f}; wrote {out_ckpt}")
    return EXIT_OK


def _load_for_eval(args):
    from .io import load_dataset, load_model

    ds = load_dataset(args.data)
    model, meta = load_model(args.checkpoint)
    if meta["kind"] != "diffog":
        raise ConfigError("eval needs a layer checkpoint (kind 'diffog')")
    spec = _task_spec(args, ds)
    return ds, model, spec


def cmd_eval(args):
    from .bench import aggregate_rows, evaluate
    from .layer import BoundSchedule
    from .metrics import write_csv, write_json
    from .plots import plot_lines

    ds, model, spec = _load_for_eval(args)
    _archive(args)
    policy = _policy(args, spec, ds)
    T_p = model.cfg.T_p
    common = dict(model=model, policy=policy, seeds=args.seeds, episodes=args.episodes,
                  T_p=T_p, T_a=args.T_a, order=args.order)
    schedule = None
    if args.schedule:
        try:
            schedule = BoundSchedule.parse(args.schedule, spec.horizon)
        except ValueError as exc:
            raise ConfigError(f"bad --schedule: {exc}") from None
    trace = []
    rows = evaluate("diffog", ds, spec, schedule=schedule, diag_trace=trace, **common)
    for r in rows:
        r["setting"] = "schedule" if schedule else "default"
    summary = {"default": aggregate_rows(rows)[0], "config": model.cfg.to_dict()}
    if schedule is not None:
        summary["phases"] = schedule.phases
    for name, values in (("alpha", args.sweep_alpha), ("bound", args.sweep_bound)):
        if not values:
            continue
        sweep = []
        for v in values:
            kw = {"alpha": v} if name == "alpha" else {"bound": v}
            srows = evaluate("diffog", ds, spec, **kw, **common)
            for r in srows:
                r["setting"] = f"{name}={v}"
            rows += srows
            agg = aggregate_rows(srows)[0]
            agg[name] = v
            sweep.append(agg)
        write_csv(os.path.join(args.out, f"sweep_{name}.csv"), sweep)
        plot_lines(sweep, name, ["max", "std"], os.path.join(args.out, f"sweep_{name}.svg"),
                   f"derivative metrics vs {name}")
        summary[f"sweep_{name}"] = sweep
    write_csv(os.path.join(args.out, "metrics.csv"), rows)
    steps = sorted({t for _, t, _ in trace})
    diag = [{"step": t, "diagonality": float(np.mean([d for _, tt, d in trace if tt == t]))}
            for t in steps]
    write_csv(os.path.join(args.out, "diagonality.csv"), diag)
    plot_lines(diag, "step", ["diagonality"], os.path.join(args.out, "diagonality.svg"),
               "diagonality of Q per replanning step")
    write_json(os.path.join(args.out, "summary.json"), summary)
    d = summary["default"]
    print(f"success {d['success_rate']:.3f}  max {d['max']:.4f}  std {d['std']:.4f}  "
          f"violations {d['violations']}")
    return EXIT_OK


def _penalty(text):
    from .baselines import PENALTY_PRESETS, PenaltyParams

    if text in PENALTY_PRESETS:
        return PENALTY_PRESETS[text]
    try:
        eta, tol, iters = text.split(",")
        return PenaltyParams(float(eta), float(tol), int(iters))
    except ValueError:
        raise ConfigError(f"bad --penalty {text!r}") from None


COMPARE_COLUMNS = ("processor", "success_rate", "max", "std", "violations", "mse")


def cmd_compare(args):
    from .bench import aggregate_rows, evaluate
    from .io import load_model
    from .metrics import write_csv, write_json

    ds, model, spec = _load_for_eval(args)
    residual = None
    if args.residual_checkpoint:
        residual, _ = load_model(args.residual_checkpoint)
    _archive(args)
    policy = _policy(args, spec, ds)
    bound = model.cfg.bound if args.bound is None else args.bound
    penalty = _penalty(args.penalty)
    common = dict(policy=policy, seeds=args.seeds, episodes=args.episodes,
                  T_p=model.cfg.T_p, T_a=args.T_a, bound=bound, order=args.order)
    table, rows = [], []
    for proc in ("none", "diffog", "clip", "penalty", "residual"):
        if proc == "residual" and residual is None:
            continue
        obj = model if proc == "diffog" else residual
        prow = evaluate(proc, ds, spec, model=obj, penalty=penalty, **common)
        rows += prow
        agg = aggregate_rows(prow)[0]
        table.append({k: agg[k] for k in COMPARE_COLUMNS})
    write_csv(os.path.join(args.out, "episodes.csv"), rows)
    if args.format in ("csv", "both"):
        write_csv(os.path.join(args.out, "compare.csv"), table)
    if args.format in ("json", "both"):
        write_json(os.path.join(args.out, "compare.json"), table)
    print(format_table(table))
    return EXIT_OK


def format_table(rows):
    cols = list(rows[0])
    cells = [[_fmt(r[c]) for c in cols] for r in rows]
    width = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, width))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, width)) for row in cells]
    return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def cmd_report(args):
    from .metrics import read_csv
    from .plots import plot_lines

    os.makedirs(args.out, exist_ok=True)
    _archive(args)
    lines = ["# Run report", ""]
    for run in args.runs:
        if not os.path.isdir(run):
            raise FileNotFoundError(f"missing run directory {run}")
        name = os.path.basename(os.path.normpath(run))
        lines += [f"## {name}", ""]
        found = False
        for fname in sorted(os.listdir(run)):
            if not fname.endswith(".csv") or fname in ("metrics.csv", "episodes.csv"):
                continue
            rows = read_csv(os.path.join(run, fname))
            if not rows:
                continue
            found = True
            stem = fname[:-4]
            lines += [f"### {stem}", "", "```", format_table(rows), "```", ""]
            x = {"sweep_alpha": "alpha", "sweep_bound": "bound", "diagonality": "step",
                 "train": "step"}.get(stem)
            if x is not None:
                ys = [c for c in rows[0] if c not in (x, "wall_time", "processor", "episodes")
                      and isinstance(rows[0][c], (int, float))]
                plot_lines(rows, x, ys[:3], os.path.join(args.out, f"{name}_{stem}.svg"), stem)
        if not found:
            lines += ["(no tables)", ""]
    with open(os.path.join(args.out, "report.md"), "w") as f:
        f.write("\n".join(lines))
    print(f"wrote {os.path.join(args.out, 'report.md')}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "compare": cmd_compare, "report": cmd_report}


def main(argv=None) -> int:
    from .layer import TrainingDiverged
    from .qp import QpError

    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (QpError, TrainingDiverged) as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
