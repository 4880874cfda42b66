"""Differentiable trajectory smoothing with hard derivative bounds.

A chunk of actions is refined by a strictly convex QP whose cost matrix is
produced by a learned generator; gradients flow through the QP's KKT
conditions so the generator can be trained end to end.
"""
from .layer import (BoundSchedule, DiffogConfig, DiffogModel, TrainRecord, forward, loss,
                    rollout_infer, train_dataset, train_refine)
from .qgen import (EncoderConfig, SpdCost, build_spd, diagonality, encode, matrix_learning_Q,
                   static_Q)
from .qp import (QpConvergenceError, QpDefinitenessError, QpError, QpInstance, QpSolution,
                 qp_backward, solve_batch, solve_qp)
from .trajectory import (ActionChunk, ConstraintSpec, SelectionSpec, SmoothingSpec, assemble,
                         build_difference, build_selection, smoothness_cost)

__version__ = "0.1.0"

__all__ = [
    "ActionChunk", "BoundSchedule", "ConstraintSpec", "DiffogConfig", "DiffogModel",
    "EncoderConfig", "QpConvergenceError", "QpDefinitenessError", "QpError", "QpInstance",
    "QpSolution", "SelectionSpec", "SmoothingSpec", "SpdCost", "TrainRecord", "assemble",
    "build_difference", "build_selection", "build_spd", "diagonality", "encode", "forward",
    "loss", "matrix_learning_Q", "qp_backward", "rollout_infer", "smoothness_cost",
    "solve_batch", "solve_qp", "static_Q", "train_dataset", "train_refine",
]
