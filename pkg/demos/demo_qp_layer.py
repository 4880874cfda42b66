"""Smoothing one jerky action chunk with the QP layer, then differentiating through it.

Run with ``python demos/demo_qp_layer.py``.
"""
import numpy as np

from diffog import (ActionChunk, ConstraintSpec, SelectionSpec, SmoothingSpec, assemble,
                    build_spd, qp_backward, smoothness_cost, solve_qp)

rng = np.random.default_rng(0)
T_p, D_a = 8, 2
sel = SelectionSpec(D_a, (0, 1))

# a straight-line reach with a jerk added every other step
line = np.linspace(0.0, 0.4, T_p)[:, None] * np.ones((1, D_a))
jerk = np.where(np.arange(T_p)[:, None] % 2 == 0, 0.08, -0.08) * np.ones((1, D_a))
chunk = ActionChunk.from_matrix(line + jerk)

# a zero embedding gives a (nearly) identity cost matrix
cost = build_spd(np.zeros((T_p * D_a) ** 2))
cons = ConstraintSpec.symmetric(0.1, sel.D_c)

print("step bound 0.1 per dimension")
print(f"input  max |step| {np.abs(np.diff(chunk.matrix, axis=0)).max():.3f}  "
      f"smoothness {smoothness_cost(chunk.values, sel, T_p, 1.0):.4f}")
for alpha in (0.0, 1.0, 4.0, 16.0):
    inst = assemble(chunk, cost, SmoothingSpec(alpha), sel, cons)
    sol = solve_qp(inst)
    y = sol.y_star.reshape(T_p, D_a)
    print(f"alpha {alpha:4.1f}  max |step| {np.abs(np.diff(y, axis=0)).max():.3f}  "
          f"smoothness {smoothness_cost(sol.y_star, sel, T_p, 1.0):.4f}  "
          f"distance to input {np.linalg.norm(sol.y_star - chunk.values):.4f}  "
          f"iterations {sol.iterations}")

# gradient of a scalar loss on the output with respect to P and q
inst = assemble(chunk, cost, SmoothingSpec(4.0), sel, cons)
sol = solve_qp(inst)
target = line.reshape(-1)
dL_dy = 2 * (sol.y_star - target)
grad_P, grad_q = qp_backward(inst, sol, dL_dy)
print(f"loss {((sol.y_star - target) ** 2).sum():.5f}, |dL/dq| {np.linalg.norm(grad_q):.4f}, "
      f"|dL/dP| {np.linalg.norm(grad_P):.4f}, active constraints {(sol.slack < 1e-6).sum()}")
