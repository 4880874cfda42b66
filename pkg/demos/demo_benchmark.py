"""Closed-loop comparison on the jerky-replay task.

A scripted base policy replays clean demonstrations with block noise added.
Each processor post-processes the chunks under a per-step bound of 0.1
(normalized units) and the episodes are scored on success, smoothness and
distance to the clean reference.  Takes about a minute on one core.
"""
from diffog.baselines import PenaltyParams
from diffog.bench import aggregate_rows, evaluate
from diffog.layer import DiffogConfig, train_refine
from diffog.qgen import EncoderConfig
from diffog.synth import SynthTaskSpec, default_policy, gen_demos

spec = SynthTaskSpec(kind="jerky-replay", jerk_amplitude=0.03)
demos = gen_demos(spec, 30)
policy = default_policy(spec, seed=7)
cfg = DiffogConfig(encoder=EncoderConfig(embed_dim=32, feedforward_dim=32), steps=200)
model, _ = train_refine(policy, demos, cfg)

print(f"{'processor':10s} {'success':>8s} {'max step':>9s} {'std':>7s} {'mse':>8s} {'viol.':>6s}")
for proc in ("none", "clip", "penalty", "diffog"):
    rows = evaluate(proc, demos, spec, model=model, policy=policy, seeds=(0, 1), episodes=25,
                    bound=0.1, penalty=PenaltyParams(0.1, 1e-7, 20000))
    a = aggregate_rows(rows)[0]
    print(f"{proc:10s} {a['success_rate']:8.3f} {a['max']:9.4f} {a['std']:7.4f} "
          f"{a['mse']:8.5f} {a['violations']:6d}")
