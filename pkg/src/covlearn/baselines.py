"""Zero-order baselines: Nelder-Mead simplex and Powell's direction set.

Both minimize the learner's outer objective inside the same box. Candidate
points are kept feasible by clipping (Nelder-Mead) or by restricting each
line search to the feasible segment (Powell). They are written here rather
than borrowed so that bound handling and determinism match the learner.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .graph import Bounds, NoiseParams, ParameterDomainError, StructuralError
from .learner import IterationRecord, OuterObjective, TrainReport, TIGHT_BOUNDS, eigen_spread

NELDER_MEAD = "nelder-mead"
POWELL = "powell"
METHODS = (NELDER_MEAD, POWELL)

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class ZeroOrderOptions:
    """``bounds`` is a :class:`Bounds` (needs a NoiseParams start) or a (lower, upper) pair."""

    method: str = NELDER_MEAD
    max_evals: int = 500
    initial_scale: float = 0.1
    fatol: float = 1e-8
    xatol: float = 1e-8
    bounds: object = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterDomainError(f"unknown zero-order method {self.method!r}")
        if self.max_evals < 1:
            raise ParameterDomainError("max_evals must be >= 1")
        if self.initial_scale <= 0 or self.fatol <= 0 or self.xatol <= 0:
            raise ParameterDomainError("scales and tolerances must be positive")


@dataclass
class ZeroOrderResult:
    x: np.ndarray
    fun: float
    evaluations: int
    iterations: int
    budget_exhausted: bool


class _BudgetExhausted(Exception):
    pass


class _Counted:
    """Objective wrapper that tracks the best point and enforces the budget."""

    def __init__(self, fun, max_evals):
        self.fun = fun
        self.max_evals = max_evals
        self.evals = 0
        self.best_x = None
        self.best_f = np.inf

    def __call__(self, x) -> float:
        if self.evals >= self.max_evals:
            raise _BudgetExhausted
        self.evals += 1
        f = float(self.fun(x))
        if f < self.best_f or self.best_x is None:
            self.best_f, self.best_x = f, np.array(x, dtype=float)
        return f


def _box(theta0, bounds):
    if isinstance(theta0, NoiseParams):
        x0 = theta0.to_vector()
        if isinstance(bounds, Bounds):
            return x0, *bounds.vectors(theta0.classes)
    else:
        x0 = np.asarray(theta0, dtype=float).ravel().copy()
        if isinstance(bounds, Bounds):
            raise StructuralError("Bounds need a NoiseParams start to fix the class order")
    if bounds is None:
        return x0, np.full_like(x0, -np.inf), np.full_like(x0, np.inf)
    lower, upper = (np.broadcast_to(np.asarray(b, dtype=float), x0.shape).copy() for b in bounds)
    if np.any(lower >= upper):
        raise ParameterDomainError("lower bounds must be below upper bounds")
    return x0, lower, upper


def _check_start(x0, lower, upper):
    if np.any(x0 < lower) or np.any(x0 > upper):
        raise ParameterDomainError("starting point violates the bounds")


def _nm_run(f, x0, lower, upper, opts, callback):
    clip = lambda x: np.clip(x, lower, upper)
    n = x0.size
    it = 0
    simplex = [x0]
    for i in range(n):
        step = opts.initial_scale * x0[i] if x0[i] != 0 else 2.5e-4
        v = x0.copy()
        v[i] += step
        if v[i] > upper[i]:
            v[i] = x0[i] - step
        simplex.append(clip(v))
    simplex = np.array(simplex)
    fs = np.array([f(v) for v in simplex])
    if callback is not None:
        callback(f.best_x, f.best_f)
    while True:
        order = np.argsort(fs, kind="stable")
        simplex, fs = simplex[order], fs[order]
        if (np.max(np.abs(fs[1:] - fs[0])) <= opts.fatol
                and np.max(np.abs(simplex[1:] - simplex[0])) <= opts.xatol):
            return simplex[0], fs[0], it
        it += 1
        c = simplex[:-1].mean(axis=0)
        xr = clip(c + (c - simplex[-1]))
        fr = f(xr)
        shrink = False
        if fr < fs[0]:
            xe = clip(c + 2.0 * (c - simplex[-1]))
            fe = f(xe)
            simplex[-1], fs[-1] = (xe, fe) if fe < fr else (xr, fr)
        elif fr < fs[-2]:
            simplex[-1], fs[-1] = xr, fr
        elif fr < fs[-1]:
            xc = clip(c + 0.5 * (xr - c))
            fc = f(xc)
            if fc <= fr:
                simplex[-1], fs[-1] = xc, fc
            else:
                shrink = True
        else:
            xc = clip(c + 0.5 * (simplex[-1] - c))
            fc = f(xc)
            if fc < fs[-1]:
                simplex[-1], fs[-1] = xc, fc
            else:
                shrink = True
        if shrink:
            # convex combinations of feasible points stay feasible
            for j in range(1, n + 1):
                simplex[j] = simplex[0] + 0.5 * (simplex[j] - simplex[0])
                fs[j] = f(simplex[j])
        if callback is not None:
            callback(f.best_x, f.best_f)


def nelder_mead(objective: Callable, theta0, opts: ZeroOrderOptions | None = None,
                callback: Callable | None = None) -> ZeroOrderResult:
    """Bounded Nelder-Mead with reflection 1, expansion 2, contraction 0.5, shrink 0.5.

    ``callback(x_best, f_best)`` runs after the initial simplex and after
    every simplex update.
    """
    opts = opts or ZeroOrderOptions(method=NELDER_MEAD)
    x0, lower, upper = _box(theta0, opts.bounds)
    _check_start(x0, lower, upper)
    f = _Counted(objective, opts.max_evals)
    it = 0
    exhausted = False
    try:
        x, fx = x0, None
        while True:
            # Clipping can flatten the simplex onto a face of the box; a fresh
            # simplex around the best point undoes that. Stop once a restart
            # brings no improvement.
            x, fx_new, k = _nm_run(f, x, lower, upper, opts, callback)
            it += k
            if fx is not None and fx - fx_new <= opts.fatol:
                break
            fx = fx_new
    except _BudgetExhausted:
        exhausted = True
    return ZeroOrderResult(f.best_x, f.best_f, f.evals, it, exhausted)


def _segment(x, d, lower, upper):
    """Feasible parameter range [tmin, tmax] of x + t d inside the box."""
    tmin, tmax = -np.inf, np.inf
    for xi, di, lo, hi in zip(x, d, lower, upper):
        if di > 0:
            tmin, tmax = max(tmin, (lo - xi) / di), min(tmax, (hi - xi) / di)
        elif di < 0:
            tmin, tmax = max(tmin, (hi - xi) / di), min(tmax, (lo - xi) / di)
    return tmin, tmax


def golden_section(fun: Callable, a: float, b: float, tol: float):
    """Minimize a unimodal scalar function on [a, b]; returns (t, f(t))."""
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fun(d)
    return (c, fc) if fc <= fd else (d, fd)


def _line_min(f, x, fx, d, lower, upper, opts, span):
    tmin, tmax = _segment(x, d, lower, upper)
    if not np.isfinite(tmin) or not np.isfinite(tmax):
        # unbounded direction: search a window scaled to the current point
        tmin = tmin if np.isfinite(tmin) else -span
        tmax = tmax if np.isfinite(tmax) else span
    if tmax - tmin <= opts.xatol:
        return x, fx
    t, ft = golden_section(lambda t: f(np.clip(x + t * d, lower, upper)), tmin, tmax, opts.xatol)
    if ft < fx:
        return np.clip(x + t * d, lower, upper), ft
    return x, fx


def powell(objective: Callable, theta0, opts: ZeroOrderOptions | None = None,
           callback: Callable | None = None) -> ZeroOrderResult:
    """Powell's direction-set method with golden-section line searches.

    A line search only moves on strict improvement. After each sweep the
    net displacement replaces the direction of largest decrease when the
    usual extrapolation test says it is worth it. ``callback(x_best, f_best)``
    runs after every line search.
    """
    opts = opts or ZeroOrderOptions(method=POWELL)
    x0, lower, upper = _box(theta0, opts.bounds)
    _check_start(x0, lower, upper)
    f = _Counted(objective, opts.max_evals)
    n = x0.size
    dirs = list(np.eye(n))
    span = 10.0 * max(1.0, float(np.max(np.abs(x0))))
    it = 0
    exhausted = False
    try:
        x, fx = x0.copy(), f(x0)
        if callback is not None:
            callback(f.best_x, f.best_f)
        while True:
            it += 1
            x_start, f_start = x.copy(), fx
            big, big_i = 0.0, 0
            for i, d in enumerate(dirs):
                f_before = fx
                x, fx = _line_min(f, x, fx, d, lower, upper, opts, span)
                if f_before - fx > big:
                    big, big_i = f_before - fx, i
                if callback is not None:
                    callback(f.best_x, f.best_f)
            if f_start - fx <= opts.fatol and np.max(np.abs(x - x_start)) <= opts.xatol:
                break
            d_new = x - x_start
            if np.max(np.abs(d_new)) <= opts.xatol:
                continue
            x_ext = np.clip(x + d_new, lower, upper)
            f_ext = f(x_ext)
            if f_ext < f_start:
                t = 2.0 * (f_start - 2.0 * fx + f_ext) * (f_start - fx - big) ** 2
                if t < big * (f_start - f_ext) ** 2:
                    x, fx = _line_min(f, x, fx, d_new, lower, upper, opts, span)
                    if callback is not None:
                        callback(f.best_x, f.best_f)
                    dirs.pop(big_i)
                    dirs.append(d_new / np.max(np.abs(d_new)))
    except _BudgetExhausted:
        exhausted = True
    return ZeroOrderResult(f.best_x, f.best_f, f.evals, it, exhausted)


def run_baseline(trajectories: Sequence, theta0: NoiseParams, opts: ZeroOrderOptions | None = None,
                 graph_builder: Callable | None = None, solver_opts=None) -> TrainReport:
    """Run a zero-order method on the outer objective and record a TrainReport.

    Rows hold the best-so-far point after each algorithm iteration (simplex
    update or line search), so curves are comparable with the learner's.
    """
    opts = opts or ZeroOrderOptions()
    if graph_builder is None:
        from .synth import build_graph as graph_builder
    if not trajectories:
        raise StructuralError("training needs at least one trajectory")
    classes = theta0.classes
    bounds = opts.bounds if opts.bounds is not None else Bounds.uniform(classes, *TIGHT_BOUNDS)
    if isinstance(bounds, Bounds):
        bounds = bounds.vectors(classes)
    run_opts = ZeroOrderOptions(opts.method, opts.max_evals, opts.initial_scale,
                                opts.fatol, opts.xatol, tuple(bounds))
    objective = OuterObjective([graph_builder(t) for t in trajectories],
                               [t.gt for t in trajectories], classes, solver_opts)
    summaries = {}

    def fun(x):
        out = objective.evaluate(x)
        summaries[np.asarray(x, dtype=float).tobytes()] = out
        return out[0]

    report = TrainReport(opts.method, classes)
    t_start = time.perf_counter()

    def record(x, fx):
        loss, tr, rot = summaries[x.tobytes()]
        report.records.append(IterationRecord(len(report.records), loss, x.tolist(),
                                              eigen_spread(x), tr, rot,
                                              time.perf_counter() - t_start))

    algo = nelder_mead if opts.method == NELDER_MEAD else powell
    res = algo(fun, theta0.to_vector(), run_opts, callback=record)
    if not report.records or report.records[-1].theta != res.x.tolist():
        # budget ran out between callbacks after an improvement
        record(res.x, res.fun)
    report.theta_star = NoiseParams.from_vector(classes, res.x)
    report.best_iteration = int(np.argmin([r.loss for r in report.records])) if report.records else -1
    report.status = "budget_exhausted" if res.budget_exhausted else "converged"
    return report
