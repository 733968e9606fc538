"""Pose-wise trajectory errors against ground truth (no alignment)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import lie
from .graph import NoiseParams, StructuralError
from .solver import SolverOptions, dead_reckoning, solve


class RMSE(NamedTuple):
    transl: float
    rot: float


def rmse(est, gt) -> RMSE:
    """Translation RMSE (meters) and heading RMSE (radians)."""
    est = np.asarray(est, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    if est.shape != gt.shape:
        raise StructuralError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    dxy = est[:, :2] - gt[:, :2]
    dth = lie.wrap_angle(est[:, 2] - gt[:, 2])
    return RMSE(float(np.sqrt(np.mean(np.sum(dxy**2, axis=1)))), float(np.sqrt(np.mean(dth**2))))


@dataclass
class EvalResult:
    per_trajectory: list
    converged: list

    @property
    def transl(self) -> float:
        return float(np.mean([r.transl for r in self.per_trajectory]))

    @property
    def rot(self) -> float:
        return float(np.mean([r.rot for r in self.per_trajectory]))


def evaluate_dataset(theta: NoiseParams, trajectories: Sequence, opts: SolverOptions | None = None,
                     graph_builder: Callable | None = None) -> EvalResult:
    """Solve each trajectory from dead reckoning and score it against ground truth.

    Dead reckoning starts at the first GPS fix and chains the odometry, which
    is the batch stand-in for incremental test-time inference.
    """
    if graph_builder is None:
        from .synth import build_graph as graph_builder
    scores, flags = [], []
    for traj in trajectories:
        graph = graph_builder(traj)
        x0 = dead_reckoning(traj.gps[0], traj.odom)
        res = solve(graph, x0, theta, opts)
        scores.append(rmse(res.estimate, traj.gt))
        flags.append(res.converged)
    return EvalResult(scores, flags)
