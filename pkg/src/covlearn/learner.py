"""Outer loop: learn diagonal noise models by Frank-Wolfe on a tracking loss.

Each outer iteration solves every training graph from its ground truth,
differentiates the solutions with respect to each covariance entry by
forward differences (one warm-started re-solve per entry), chains that
Jacobian with the tangent tracking error, and takes a Frank-Wolfe step
inside the eigenvalue box.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import lie
from .graph import Bounds, FactorGraph, NoiseParams, ParameterDomainError, StructuralError
from .metrics import rmse
from .solver import ConvergenceError, SolverOptions, solve, solve_many

TIGHT_BOUNDS = (0.1, 10.0)
LOOSE_BOUNDS = (1e-6, 1e6)
COLUMN_BATCH = 6  # perturbed solves sharing one batched LM run


@dataclass
class TrainConfig:
    max_outer_iterations: int = 100
    M: float = 10.0
    tau_rel: float = 1e-4
    bounds: Bounds | None = None
    window: int = 5
    window_tol: float = 1e-8
    threads: int = 1
    max_tau_halvings: int = 3
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.M < 2:
            raise ParameterDomainError("M must be >= 2 so that the first step size is <= 1")
        if self.tau_rel <= 0:
            raise ParameterDomainError("tau_rel must be positive")
        if self.max_outer_iterations < 1 or self.window < 1 or self.threads < 1:
            raise ParameterDomainError("iteration counts, window and threads must be >= 1")


@dataclass
class IterationRecord:
    iteration: int
    loss: float
    theta: list
    spread: float
    train_rmse_transl: float
    train_rmse_rot: float
    wall_seconds: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainReport:
    method: str
    classes: tuple
    records: list = field(default_factory=list)
    theta_star: NoiseParams | None = None
    best_iteration: int = -1
    status: str = "running"

    @property
    def spread(self) -> float:
        return eigen_spread(self.theta_star)

    @property
    def best_loss(self) -> float:
        return self.records[self.best_iteration].loss


def tracking_loss(estimate, gt) -> float:
    """Half the squared norm of the stacked pose-wise tangent errors of one trajectory."""
    e = _tangent_errors(estimate, gt)
    return 0.5 * float(e @ e)


def dataset_loss(estimates: Sequence, gts: Sequence) -> float:
    if len(estimates) != len(gts) or not gts:
        raise StructuralError("need one estimate per ground-truth trajectory")
    return float(np.mean([tracking_loss(e, g) for e, g in zip(estimates, gts)]))


def _tangent_errors(estimate, gt) -> np.ndarray:
    estimate = np.asarray(estimate, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    if estimate.shape != gt.shape:
        raise StructuralError(f"trajectory lengths differ: {len(estimate)} vs {len(gt)}")
    # pose-major: rows 3t..3t+2 belong to pose t
    return lie.ominus(estimate, gt).ravel()


def solution_jacobian(graph: FactorGraph, theta: NoiseParams, x0, bounds: Bounds | None = None,
                      opts: SolverOptions | None = None, tau_rel: float = 1e-4,
                      threads: int = 1, base=None, max_halvings: int = 3):
    """Forward-difference Jacobian of the solver output w.r.t. every covariance entry.

    Column k is ``vec(f(theta + tau_k e_k) (-) f(theta)) / tau_k`` with
    ``tau_k = tau_rel * max(theta_k, lower_k)``. Perturbed solves start from
    the unperturbed solution. A column whose solve fails is retried with a
    halved step, at most ``max_halvings`` times.

    Returns ``(S, f)`` with S of shape (3 T, m) and f the unperturbed solution.
    """
    opts = opts or SolverOptions()
    if base is None:
        base = solve(graph, x0, theta, opts)
    if not base.converged:
        raise ConvergenceError("unperturbed solve did not converge")
    f = base.estimate
    classes = theta.classes
    vec = theta.to_vector()
    lower = bounds.vectors(classes)[0] if bounds is not None else np.zeros_like(vec)
    steps = tau_rel * np.maximum(vec, lower)
    m = vec.size

    def columns(ks):
        ks = np.asarray(ks)
        taus = steps[ks].copy()
        out = {}
        for _ in range(max_halvings + 1):
            thetas = []
            for k, tau in zip(ks, taus):
                pert = vec.copy()
                pert[k] += tau
                thetas.append(NoiseParams.from_vector(classes, pert))
            results = solve_many(graph, f, thetas, opts)
            ok = np.array([r.converged for r in results], dtype=bool)
            for k, tau, r in zip(ks[ok], taus[ok], [r for r in results if r.converged]):
                out[int(k)] = lie.ominus(r.estimate, f).ravel() / tau
            ks, taus = ks[~ok], taus[~ok] * 0.5
            if not ks.size:
                return out
        raise ConvergenceError(f"perturbed solve for parameter {int(ks[0])} failed "
                               f"after {max_halvings} halvings")

    # Fixed chunks, so the arithmetic does not depend on the thread count.
    chunks = [range(i, min(i + COLUMN_BATCH, m)) for i in range(0, m, COLUMN_BATCH)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(columns, chunks))
    else:
        parts = [columns(c) for c in chunks]
    found = {k: v for part in parts for k, v in part.items()}
    cols = [found[k] for k in range(m)]
    return np.column_stack(cols), f


def loss_gradient(S, estimate, gt) -> np.ndarray:
    """(1/|D|) sum_j S_j^T vec(J_j^-T e_j), with e_j = estimate_j (-) gt_j.

    S measures solution changes as left increments of the solution itself,
    while the loss is taken on e = Log(f o gt^-1). Moving f by a left increment
    d changes e by J_l(e)^-1 d, so each pose's error is mapped through the
    inverse-transposed left Jacobian. For small errors J_l ~ I and this is the
    plain S^T vec(e).

    Accepts a single trajectory (arrays) or parallel sequences over a dataset.
    """
    if isinstance(S, np.ndarray):
        S, estimate, gt = [S], [estimate], [gt]
    if not (len(S) == len(estimate) == len(gt)) or not S:
        raise StructuralError("S, estimates and ground truths must align")
    total = None
    for Sj, ej, gj in zip(S, estimate, gt):
        e = _tangent_errors(ej, gj)
        Sj = np.asarray(Sj, dtype=float)
        if Sj.ndim != 2 or Sj.shape[0] != e.size:
            raise StructuralError(f"S has shape {Sj.shape}, expected ({e.size}, m)")
        e3 = e.reshape(-1, 3)
        weighted = np.linalg.solve(np.swapaxes(lie.left_jacobian(e3), -1, -2), e3[..., None])
        term = Sj.T @ weighted.ravel()
        total = term if total is None else total + term
    return total / len(S)


def fw_direction(grad, lower, upper) -> np.ndarray:
    """Vertex of the box minimizing s^T grad; zero components pick the lower bound."""
    grad = np.asarray(grad, dtype=float)
    return np.where(grad < 0.0, upper, lower).astype(float)


def frank_wolfe_step(grad, theta, lower, upper, itr: int, M: float) -> np.ndarray:
    """theta + alpha (s* - theta) with alpha = 2 / (M + itr)."""
    theta = np.asarray(theta, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(theta < lower) or np.any(theta > upper):
        warnings.warn("theta outside the feasible box; projecting before the step", RuntimeWarning)
        theta = np.clip(theta, lower, upper)
    alpha = 2.0 / (M + itr)
    s = fw_direction(grad, lower, upper)
    # clip only absorbs rounding; the convex combination is already feasible
    return np.clip(theta + alpha * (s - theta), lower, upper)


def eigen_spread(theta) -> float:
    """Largest covariance entry over the smallest, across all classes."""
    v = theta.to_vector() if isinstance(theta, NoiseParams) else np.asarray(theta, dtype=float)
    return float(v.max() / v.min())


class OuterObjective:
    """Mean tracking loss over training graphs solved from their ground truth.

    Shared by the gradient learner and the zero-order baselines.
    """

    def __init__(self, graphs: Sequence[FactorGraph], gts: Sequence, classes: Sequence[str],
                 opts: SolverOptions | None = None):
        self.graphs = list(graphs)
        self.gts = [np.asarray(g, dtype=float) for g in gts]
        self.classes = tuple(sorted(classes))
        self.opts = opts or SolverOptions()
        self.evaluations = 0

    def solve_all(self, theta: NoiseParams):
        return [solve(g, gt, theta, self.opts) for g, gt in zip(self.graphs, self.gts)]

    def evaluate(self, theta_vec) -> tuple[float, float, float]:
        """(loss, train translation RMSE, train rotation RMSE) at a flat theta."""
        self.evaluations += 1
        theta = NoiseParams.from_vector(self.classes, theta_vec)
        ests = [r.estimate for r in self.solve_all(theta)]
        return self.summarize(ests)

    def summarize(self, ests) -> tuple[float, float, float]:
        scores = [rmse(e, g) for e, g in zip(ests, self.gts)]
        return (
            dataset_loss(ests, self.gts),
            float(np.mean([s.transl for s in scores])),
            float(np.mean([s.rot for s in scores])),
        )

    def __call__(self, theta_vec) -> float:
        return self.evaluate(theta_vec)[0]


def train(trajectories: Sequence, theta0: NoiseParams, config: TrainConfig | None = None,
          graph_builder: Callable | None = None, on_iteration: Callable | None = None) -> TrainReport:
    """Run the bilevel training loop and return the best-loss iterate.

    ``trajectories`` need ``.gt`` and whatever ``graph_builder`` consumes
    (by default the navigation trajectories of :mod:`covlearn.synth`).
    """
    config = config or TrainConfig()
    if graph_builder is None:
        from .synth import build_graph as graph_builder
    if not trajectories:
        raise StructuralError("training needs at least one trajectory")
    classes = theta0.classes
    bounds = config.bounds or Bounds.uniform(classes, *TIGHT_BOUNDS)
    lower, upper = bounds.vectors(classes)
    theta = theta0.to_vector()
    if np.any(theta < lower) or np.any(theta > upper):
        raise ParameterDomainError("initial theta violates the bounds")

    graphs = [graph_builder(t) for t in trajectories]
    objective = OuterObjective(graphs, [t.gt for t in trajectories], classes, config.solver)
    report = TrainReport("ours", classes)
    t_start = time.perf_counter()
    best = np.inf
    status = "max_iterations"

    for itr in range(config.max_outer_iterations):
        assert np.all(theta >= lower) and np.all(theta <= upper)
        th = NoiseParams.from_vector(classes, theta)
        try:
            Ss, ests = [], []
            for g, gt in zip(graphs, objective.gts):
                S, f = solution_jacobian(g, th, gt, bounds, config.solver, config.tau_rel,
                                         config.threads, max_halvings=config.max_tau_halvings)
                Ss.append(S)
                ests.append(f)
        except ConvergenceError:
            status = "aborted"
            break
        loss, tr, rot = objective.summarize(ests)
        grad = loss_gradient(Ss, ests, objective.gts)
        rec = IterationRecord(itr, loss, theta.tolist(), eigen_spread(theta), tr, rot,
                              time.perf_counter() - t_start)
        report.records.append(rec)
        if on_iteration is not None:
            on_iteration(rec)
        if loss < best:
            best = loss
            report.best_iteration = itr
        losses = [r.loss for r in report.records]
        if len(losses) > config.window:
            before = min(losses[:-config.window])
            if before - min(losses[-config.window:]) < config.window_tol:
                status = "converged"
                break
        theta = frank_wolfe_step(grad, theta, lower, upper, itr, config.M)

    report.status = status
    if report.records:
        report.theta_star = NoiseParams.from_vector(
            classes, report.records[report.best_iteration].theta)
    return report
