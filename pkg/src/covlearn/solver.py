"""Batch Levenberg-Marquardt over SE(2) trajectories.

This is the inner problem of the learner: for fixed noise parameters it
returns the minimizer of the whitened least-squares objective. Everything is
deterministic (Cholesky without pivoting, fixed iteration order), which keeps
the finite differences taken by the outer loop free of solver noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from . import lie
from .graph import (
    FactorGraph, NoiseParams, SparseSystem, StructuralError, batch_jacobians, batch_residuals,
)


# Near-singular headings make Gauss-Newton contract slowly (ratios near 1),
# where round-off makes single steps grow now and then before the iteration
# has settled.
FLOOR_PATIENCE = 2


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 100
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.1
    error_tol: float = 1e-10
    step_tol: float = 1e-10
    max_damping: float = 1e12

    def __post_init__(self):
        for name in ("max_iterations", "initial_damping", "damping_up", "damping_down",
                     "error_tol", "step_tol", "max_damping"):
            if getattr(self, name) <= 0:
                raise ValueError(f"SolverOptions.{name} must be positive")


@dataclass
class SolveResult:
    """Outcome of :func:`solve`; ``iterations`` counts accepted steps."""

    estimate: np.ndarray
    final_error: float
    iterations: int
    converged: bool


def _damped_solve(H, g, damping: float, banded: bool) -> np.ndarray:
    """Cholesky solve of (H + damping I) delta = g; H dense or in upper band storage."""
    if banded:
        ab = H.copy()
        ab[-1] += damping
    else:
        ab = H + damping * np.eye(H.shape[0])
    if not np.all(np.isfinite(ab)):
        raise np.linalg.LinAlgError("normal matrix has non-finite entries")
    if banded:
        cb = scipy.linalg.cholesky_banded(ab, lower=False, check_finite=False)
        return scipy.linalg.cho_solve_banded((cb, False), g, check_finite=False)
    c, low = scipy.linalg.cho_factor(ab, lower=False, check_finite=False)
    return scipy.linalg.cho_solve((c, low), g, check_finite=False)


def _bandwidth(n: int, pose_span: int) -> int | None:
    """Superdiagonals to keep for band storage, or None when dense is the better choice."""
    u = 3 * pose_span + 2
    return u if 4 * u < n else None


def gauss_newton_step(system: SparseSystem, damping: float = 0.0) -> np.ndarray:
    """Solve (A^T A + damping I) delta = A^T b by Cholesky.

    Chain-structured graphs give a narrow band (odometry only links
    neighbours), so the factorization runs on band storage when the band is
    much narrower than the matrix; otherwise on the dense matrix. Both are
    plain Cholesky without pivoting.

    Returns per-pose increments of shape (num_poses, 3). Raises
    ``numpy.linalg.LinAlgError`` when the damped normal matrix is not
    positive definite.
    """
    g = system.gradient
    u = _bandwidth(g.size, system.pose_span)
    H = system.normal_matrix() if u is None else system.normal_band(u)
    return _damped_solve(H, g, damping, u is not None).reshape(system.num_poses, 3)


def retract(x, delta) -> np.ndarray:
    """Apply per-pose left increments: x_t <- Exp(delta_t) o x_t."""
    return lie.oplus(delta, x)


class _Batch:
    """Whitened normal equations for P problems sharing one graph."""

    def __init__(self, graph: FactorGraph, thetas: Sequence[NoiseParams]):
        self.graph = graph
        self.var = np.array([graph.theta_rows(t) for t in thetas])  # (P, F, 3)
        self.w = 1.0 / np.sqrt(self.var)
        n = 3 * graph.num_poses
        self.u = _bandwidth(n, graph._index["pose_span"])
        rows, cols = graph._index["layout"]
        if self.u is None:
            self.pos, self.size = rows * n + cols, n * n + 1
        else:
            # lower-triangle products repeat upper ones; send them to a spare bin
            self.pos = np.where(cols >= rows, (self.u + rows - cols) * n + cols, (self.u + 1) * n)
            self.size = (self.u + 1) * n + 1

    def errors(self, r, sel) -> np.ndarray:
        return 0.5 * np.sum(r * r / self.var[sel], axis=(1, 2))

    def systems(self, X, r, sel):
        """Undamped normal matrices and right-hand sides for problems ``sel`` at states X."""
        q, n = len(sel), 3 * self.graph.num_poses
        w = self.w[sel]
        b = -(w * r)
        vals, gidx, gvals = [], [], []
        for fr, ids, B in batch_jacobians(self.graph, X):
            Bw = w[:, fr][:, :, None, :, None] * B
            vals.append(np.einsum("qnaji,qncjk->qnacik", Bw, Bw).reshape(q, -1))
            gvals.append(np.einsum("qnaji,qnj->qnai", Bw, b[:, fr]).reshape(q, -1))
            gidx.append((3 * ids[:, :, None] + np.arange(3)).ravel())
        off = np.arange(q)[:, None]
        H = np.bincount((self.pos + self.size * off).ravel(), np.concatenate(vals, axis=1).ravel(),
                        minlength=q * self.size).reshape(q, self.size)[:, :-1]
        H = H.reshape(q, n, n) if self.u is None else H.reshape(q, self.u + 1, n)
        gi = np.concatenate(gidx)
        g = np.bincount((gi + n * off).ravel(), np.concatenate(gvals, axis=1).ravel(),
                        minlength=q * n).reshape(q, n)
        return H, g


def solve(graph: FactorGraph, x0, theta: NoiseParams,
          opts: SolverOptions | None = None) -> SolveResult:
    return solve_many(graph, x0, [theta], opts)[0]


def solve_many(graph: FactorGraph, x0, thetas: Sequence[NoiseParams],
               opts: SolverOptions | None = None) -> list[SolveResult]:
    """Independent LM solves of one graph under several noise parameters.

    ``x0`` is a single initial trajectory shared by all problems or one per
    problem. Every problem follows exactly the iteration of a lone solve; the
    batch only shares the array work.
    """
    opts = opts or SolverOptions()
    thetas = list(thetas)
    P, N = len(thetas), graph.num_poses
    x = np.array(x0, dtype=float)
    if x.shape == (N, 3):
        x = np.repeat(x[None], P, axis=0)
    if x.shape != (P, N, 3):
        raise StructuralError(f"initial trajectory has shape {np.shape(x0)}, expected ({N}, 3)")
    for theta in thetas:
        missing = [c for c in graph.noise_classes if c not in theta]
        if missing:
            raise StructuralError(f"theta lacks noise classes {missing}")
    if P == 0:
        return []

    batch = _Batch(graph, thetas)
    everyone = np.arange(P)
    r = batch_residuals(graph, x)
    err = batch.errors(r, everyone)
    lam = np.full(P, opts.initial_damping)
    floor_step = np.full(P, np.inf)
    stalls = np.zeros(P, dtype=int)
    its = np.zeros(P, dtype=int)
    accepted = np.zeros(P, dtype=int)
    converged = np.zeros(P, dtype=bool)
    done = np.zeros(P, dtype=bool)
    stale = np.ones(P, dtype=bool)  # needs a new linearization
    H = g = None
    while True:
        done |= stale & (its >= opts.max_iterations)
        relin = np.flatnonzero(stale & ~done)
        if relin.size:
            Hn, gn = batch.systems(x[relin], r[relin], relin)
            if H is None:
                H, g = np.empty((P,) + Hn.shape[1:]), np.empty((P, gn.shape[1]))
            H[relin], g[relin] = Hn, gn
            its[relin] += 1
            stale[relin] = False
        active = np.flatnonzero(~done)
        if not active.size:
            break

        deltas = np.zeros((P, N, 3))
        solved = np.zeros(P, dtype=bool)
        for p in active:
            try:
                deltas[p] = _damped_solve(H[p], g[p], lam[p], batch.u is not None).reshape(N, 3)
                solved[p] = True
            except np.linalg.LinAlgError:
                pass
        size = np.max(np.abs(deltas), axis=(1, 2))
        tiny = solved & ~done & (size < opts.step_tol)
        converged |= tiny
        done |= tiny
        trial = np.flatnonzero(solved & ~done)
        if trial.size:
            x_new = retract(x[trial], deltas[trial])
            r_new = batch_residuals(graph, x_new)
            err_new = batch.errors(r_new, trial)
        worse = [p for p in active if not solved[p] and not done[p]]
        for j, p in enumerate(trial):
            take = False
            if err_new[j] < err[p]:
                take = True
                lam[p] = max(lam[p] * opts.damping_down, 1e-15)
            elif err_new[j] - err[p] < opts.error_tol and size[p] < 1e-6:
                # Round-off floor: the error can no longer resolve the step,
                # but the linear model still can. Keep stepping until the
                # steps stop shrinking for FLOOR_PATIENCE steps in a row.
                if size[p] < floor_step[p]:
                    floor_step[p], stalls[p] = size[p], 0
                else:
                    stalls[p] += 1
                take = stalls[p] < FLOOR_PATIENCE
                converged[p] = done[p] = not take
            else:
                worse.append(p)
            if take:
                x[p], r[p], err[p] = x_new[j], r_new[j], err_new[j]
                accepted[p] += 1
                stale[p] = True
        for p in worse:
            lam[p] *= opts.damping_up
            if lam[p] > opts.max_damping:
                # No descent direction left at this linearization point.
                converged[p] = float(np.max(np.abs(g[p]))) < 1e-6
                done[p] = True
    return [SolveResult(x[p], float(err[p]), int(accepted[p]), bool(converged[p])) for p in range(P)]


def dead_reckoning(first_fix, odometry) -> np.ndarray:
    """Chain relative odometry measurements starting from ``first_fix``."""
    x = [np.asarray(first_fix, dtype=float)]
    for z in np.asarray(odometry, dtype=float).reshape(-1, 3):
        x.append(lie.compose(x[-1], z))
    return np.array(x)


class ConvergenceError(RuntimeError):
    """An inner solve needed by the caller did not converge."""
