"""Refine-mode training on an offset base policy: learned Q against fixed ones.

The base policy replays demonstrations shifted by a constant offset.  A
static identity Q cannot undo the shift; a single learned matrix can partly
undo it; the transformer generator, which sees the chunk, does best.
Takes about a minute on one core.
"""
import time

import numpy as np

from diffog.layer import DiffogConfig, DiffogModel, loss, refine_pairs, train_pairs
from diffog.qgen import EncoderConfig
from diffog.synth import BasePolicyStub, SynthTaskSpec, gen_demos

spec = SynthTaskSpec()
policy = BasePolicyStub("replay+offset", offset=0.05)
train_in, train_tg = refine_pairs(policy, gen_demos(spec, 30, seed=0), 16)
eval_in, eval_tg = refine_pairs(policy, gen_demos(spec, 10, seed=100), 16)
print(f"{len(train_in)} training pairs, {len(eval_in)} held-out pairs")

for variant, lr in (("static", 1e-4), ("matrix_learning", 1e-3), ("transformer", 1e-4)):
    cfg = DiffogConfig(variant=variant, lr=lr, steps=300,
                       encoder=EncoderConfig(embed_dim=32, feedforward_dim=32))
    model = DiffogModel(cfg)
    start = time.perf_counter()
    if model.trainable:
        records = train_pairs(model, train_in, train_tg)
        curve = [np.mean([r.loss for r in records[i:i + 50]]) for i in range(0, 300, 50)]
        print(f"{variant:16s} training loss every 50 steps: "
              + " ".join(f"{v:.4f}" for v in curve))
    held_out = loss(model(eval_in), eval_tg)
    print(f"{variant:16s} held-out loss {held_out:.4f}  ({time.perf_counter() - start:.0f} s)")
