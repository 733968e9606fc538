"""Factor graphs over SE(2) trajectories with diagonal Gaussian noise models.

A graph holds GPS-style unary factors and odometry binary factors. Each
factor names a noise class; a :class:`NoiseParams` maps every class to the
three diagonal covariance entries used to whiten that factor's residual.

Residual Jacobians are obtained by central differences in the left tangent
space of each pose, evaluated for all factors of a kind at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import lie

GPS = "gps"
ODOM = "odom"
JACOBIAN_STEP = 1e-6
MAX_DENSE_COLUMNS = 2000


class StructuralError(ValueError):
    """Inconsistent graph, trajectory or vector dimensions."""


class ParameterDomainError(ValueError):
    """Noise parameters or bounds outside their admissible domain."""


def _triple(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape != (3,):
        raise StructuralError(f"{name} must have 3 entries, got {a.shape}")
    return a


class NoiseParams:
    """Per-class diagonal covariance entries.

    Classes are kept in sorted order; that order also defines the layout of
    the flat parameter vector (class-major, three coordinates per class).
    """

    def __init__(self, entries: Mapping[str, Iterable[float]]):
        if not entries:
            raise ParameterDomainError("noise parameters need at least one class")
        self._entries = {}
        for name in sorted(entries):
            v = _triple(entries[name], f"theta[{name!r}]")
            if not np.all(np.isfinite(v)) or np.any(v <= 0.0):
                raise ParameterDomainError(
                    f"theta[{name!r}] must be strictly positive, got {v.tolist()}"
                )
            self._entries[name] = v
            v.flags.writeable = False

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(self._entries)

    @property
    def size(self) -> int:
        return 3 * len(self._entries)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name) -> bool:
        return name in self._entries

    def items(self):
        return self._entries.items()

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self._entries[c] for c in self.classes])

    @classmethod
    def from_vector(cls, classes: Sequence[str], vec) -> "NoiseParams":
        vec = np.asarray(vec, dtype=float).reshape(-1)
        classes = sorted(classes)
        if vec.shape != (3 * len(classes),):
            raise StructuralError(
                f"flat theta has {vec.size} entries, expected {3 * len(classes)}"
            )
        return cls({c: vec[3 * k: 3 * k + 3] for k, c in enumerate(classes)})

    def scaled(self, c: float) -> "NoiseParams":
        return NoiseParams({k: c * v for k, v in self._entries.items()})

    def to_dict(self) -> dict[str, list[float]]:
        return {k: v.tolist() for k, v in self._entries.items()}

    def __eq__(self, other) -> bool:
        if not isinstance(other, NoiseParams):
            return NotImplemented
        return self.classes == other.classes and all(
            np.array_equal(self[c], other[c]) for c in self.classes
        )

    def __repr__(self) -> str:
        return f"NoiseParams({self.to_dict()})"


@dataclass(frozen=True)
class Bounds:
    """Box [lower, upper] on every covariance entry, per class and coordinate."""

    lower: Mapping[str, np.ndarray]
    upper: Mapping[str, np.ndarray]

    def __post_init__(self):
        if set(self.lower) != set(self.upper):
            raise ParameterDomainError("lower and upper bounds cover different classes")
        lo = {k: _triple(self.lower[k], f"lower[{k!r}]") for k in sorted(self.lower)}
        hi = {k: _triple(self.upper[k], f"upper[{k!r}]") for k in sorted(self.upper)}
        for k in lo:
            if np.any(lo[k] <= 0.0):
                raise ParameterDomainError(f"lower bound of {k!r} must be > 0")
            if np.any(hi[k] <= lo[k]):
                raise ParameterDomainError(f"upper bound of {k!r} must exceed lower")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def uniform(cls, classes: Iterable[str], lo: float, hi: float) -> "Bounds":
        classes = list(classes)
        return cls({c: np.full(3, lo) for c in classes}, {c: np.full(3, hi) for c in classes})

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(self.lower)

    def vectors(self, classes: Sequence[str] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Flat (lower, upper) vectors in the layout of ``NoiseParams.to_vector``."""
        classes = sorted(classes) if classes is not None else list(self.classes)
        missing = [c for c in classes if c not in self.lower]
        if missing:
            raise StructuralError(f"bounds missing classes {missing}")
        return (
            np.concatenate([self.lower[c] for c in classes]),
            np.concatenate([self.upper[c] for c in classes]),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Bounds):
            return NotImplemented
        if self.classes != other.classes:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.vectors(), other.vectors()))

    __hash__ = None

    def contains(self, theta: NoiseParams) -> bool:
        lo, hi = self.vectors(theta.classes)
        v = theta.to_vector()
        return bool(np.all(v >= lo) and np.all(v <= hi))

    def project(self, theta: NoiseParams) -> NoiseParams:
        lo, hi = self.vectors(theta.classes)
        return NoiseParams.from_vector(theta.classes, np.clip(theta.to_vector(), lo, hi))

    def max_spread(self) -> float:
        lo, hi = self.vectors()
        return float(hi.max() / lo.min())

    def to_dict(self) -> dict:
        return {
            "lower": {k: v.tolist() for k, v in self.lower.items()},
            "upper": {k: v.tolist() for k, v in self.upper.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Bounds":
        return cls(dict(d["lower"]), dict(d["upper"]))


@dataclass(frozen=True)
class Factor:
    kind: str
    variables: tuple[int, ...]
    z: np.ndarray
    noise_class: str

    def __post_init__(self):
        if self.kind not in (GPS, ODOM):
            raise StructuralError(f"unknown factor kind {self.kind!r}")
        variables = tuple(int(v) for v in self.variables)
        want = 1 if self.kind == GPS else 2
        if len(variables) != want:
            raise StructuralError(f"{self.kind} factor needs {want} variable(s), got {variables}")
        if self.kind == ODOM and variables[1] != variables[0] + 1:
            raise StructuralError(f"odometry must link consecutive poses, got {variables}")
        z = np.asarray(self.z, dtype=float).reshape(-1)
        if z.shape != (3,):
            raise StructuralError("measurement must be an (x, y, theta) triple")
        z = z.copy()
        z[2] = lie.wrap_angle(z[2])
        z.flags.writeable = False
        object.__setattr__(self, "variables", variables)
        object.__setattr__(self, "z", z)

    @classmethod
    def gps(cls, t: int, z, noise_class: str = GPS) -> "Factor":
        return cls(GPS, (t,), z, noise_class)

    @classmethod
    def odom(cls, t: int, z_rel, noise_class: str = ODOM) -> "Factor":
        """Odometry from pose ``t - 1`` to pose ``t``."""
        return cls(ODOM, (t - 1, t), z_rel, noise_class)


@dataclass(frozen=True)
class FactorGraph:
    num_poses: int
    factors: tuple[Factor, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if self.num_poses < 1:
            raise StructuralError("graph needs at least one pose")
        touched = np.zeros(self.num_poses, dtype=bool)
        for f in self.factors:
            for v in f.variables:
                if not 0 <= v < self.num_poses:
                    raise StructuralError(f"factor references pose {v} of {self.num_poses}")
                touched[v] = True
        if not touched.all():
            raise StructuralError(f"poses {np.flatnonzero(~touched).tolist()} have no factor")

    @property
    def num_factors(self) -> int:
        return len(self.factors)

    @cached_property
    def noise_classes(self) -> tuple[str, ...]:
        return tuple(sorted({f.noise_class for f in self.factors}))

    @cached_property
    def _index(self) -> dict:
        kinds = np.array([f.kind for f in self.factors])
        gps_rows = np.flatnonzero(kinds == GPS)
        odom_rows = np.flatnonzero(kinds == ODOM)
        cls_pos = {c: k for k, c in enumerate(self.noise_classes)}
        gps_var = np.array([self.factors[i].variables[0] for i in gps_rows], dtype=int)
        odom_prev = np.array([self.factors[i].variables[0] for i in odom_rows], dtype=int)
        ix = {
            "gps_rows": gps_rows,
            "gps_var": gps_var,
            "gps_ids": gps_var[:, None],
            "gps_z": np.array([self.factors[i].z for i in gps_rows]).reshape(-1, 3),
            "odom_rows": odom_rows,
            "odom_prev": odom_prev,
            "odom_ids": np.column_stack([odom_prev, odom_prev + 1]).astype(int),
            "odom_z": np.array([self.factors[i].z for i in odom_rows]).reshape(-1, 3),
            "class_idx": np.array([cls_pos[f.noise_class] for f in self.factors], dtype=int),
        }
        ix["gps_zinv"] = lie.inverse(ix["gps_z"])
        ix["odom_zinv"] = lie.inverse(ix["odom_z"])
        present = [ix[k] for k, rows in (("gps_ids", gps_rows), ("odom_ids", odom_rows)) if rows.size]
        ix["layout"] = normal_layout(present)
        ix["pose_span"] = max((int(np.max(ids.max(axis=1) - ids.min(axis=1))) for ids in present),
                              default=0)
        return ix

    def theta_rows(self, theta: NoiseParams) -> np.ndarray:
        """Per-factor covariance diagonals, shape (num_factors, 3)."""
        missing = [c for c in self.noise_classes if c not in theta]
        if missing:
            raise StructuralError(f"theta lacks noise classes {missing}")
        table = np.array([theta[c] for c in self.noise_classes])
        return table[self._index["class_idx"]]


def _check_states(graph: FactorGraph, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (graph.num_poses, 3):
        raise StructuralError(f"states have shape {x.shape}, expected ({graph.num_poses}, 3)")
    return x


def _gps_res(x, z):
    return lie.ominus(x, z)


def _odom_res(xp, xc, z):
    return lie.ominus(lie.between(xp, xc), z)


# Batched forms taking precomputed measurement inverses. They expand
# Log(x o z^-1) and Log(x_p^-1 o x_c o z^-1) into one pass over the arrays.
def _gps_res_zinv(x, zinv):
    c, s = np.cos(x[:, 2]), np.sin(x[:, 2])
    return lie.log_parts(x[:, 0] + c * zinv[:, 0] - s * zinv[:, 1],
                         x[:, 1] + s * zinv[:, 0] + c * zinv[:, 1],
                         x[:, 2] + zinv[:, 2])


def _odom_res_zinv(xp, xc, zinv):
    cp, sp_ = np.cos(xp[:, 2]), np.sin(xp[:, 2])
    dx, dy = xc[:, 0] - xp[:, 0], xc[:, 1] - xp[:, 1]
    dth = xc[:, 2] - xp[:, 2]
    c, s = np.cos(dth), np.sin(dth)
    return lie.log_parts(cp * dx + sp_ * dy + c * zinv[:, 0] - s * zinv[:, 1],
                         -sp_ * dx + cp * dy + s * zinv[:, 0] + c * zinv[:, 1],
                         dth + zinv[:, 2])


def residual(factor: Factor, states) -> np.ndarray:
    """Tangent-space prediction error of one factor."""
    states = np.asarray(states, dtype=float).reshape(-1, 3)
    for v in factor.variables:
        if not 0 <= v < len(states):
            raise StructuralError(f"factor references pose {v} but only {len(states)} states given")
    if factor.kind == GPS:
        return _gps_res(states[factor.variables[0]], factor.z)
    return _odom_res(states[factor.variables[0]], states[factor.variables[1]], factor.z)


def residuals(graph: FactorGraph, x) -> np.ndarray:
    """All factor residuals stacked in factor order, shape (num_factors, 3)."""
    return batch_residuals(graph, _check_states(graph, x)[None])[0]


def whiten(r, blocks, theta_i):
    """Scale a residual and its Jacobian blocks by diag(theta_i)^(-1/2).

    Returns ``(whitened_r, whitened_blocks)``; ``blocks`` is any sequence of
    3x3 arrays (one per variable of the factor).
    """
    theta_i = np.asarray(theta_i, dtype=float)
    if np.any(theta_i <= 0.0):
        raise ParameterDomainError(f"noise entries must be positive, got {theta_i.tolist()}")
    w = 1.0 / np.sqrt(theta_i)
    return w * np.asarray(r, dtype=float), [w[:, None] * np.asarray(B, dtype=float) for B in blocks]


def total_error(graph: FactorGraph, x, theta: NoiseParams) -> float:
    """Sum over factors of 1/2 r^T diag(theta_i)^-1 r."""
    r = residuals(graph, x)
    return 0.5 * float(np.sum(r * r / graph.theta_rows(theta)))


def _fd_jacobians(fun, args, slots, h=JACOBIAN_STEP) -> np.ndarray:
    """Central-difference Jacobians of ``fun`` w.r.t. left perturbations of ``args[slot]``.

    All 6 * len(slots) perturbed evaluations go through ``fun`` in one
    batched call. Returns shape (n, len(slots), 3, 3).
    """
    n = args[0].shape[0]
    ns = len(slots)
    moves = _FD_MOVES if h == JACOBIAN_STEP else lie.exp(np.concatenate([h * np.eye(3), -h * np.eye(3)]))
    batched = []
    for i, a in enumerate(args):
        rep = np.broadcast_to(a, (ns, 6, n, 3)).copy()
        for j, slot in enumerate(slots):
            if slot == i:
                rep[j] = lie.compose(moves[:, None, :], a[None, :, :])
        batched.append(rep.reshape(-1, 3))
    r = fun(*batched).reshape(ns, 6, n, 3)
    J = (r[:, :3] - r[:, 3:]) / (2.0 * h)  # (slot, k, n, row)
    return J.transpose(2, 0, 3, 1)


_FD_MOVES = lie.exp(np.concatenate([JACOBIAN_STEP * np.eye(3), -JACOBIAN_STEP * np.eye(3)]))


@dataclass(frozen=True)
class SparseSystem:
    """Whitened linearization: minimize ||A delta - b||^2 over per-pose increments.

    The Jacobian is held as groups of dense 3x3 blocks; ``groups`` holds
    ``(factor_rows, pose_ids, blocks)`` with shapes (n,), (n, k) and
    (n, k, 3, 3) for factors touching k poses. ``A`` is materialized on demand.
    """

    groups: tuple
    b: np.ndarray
    num_poses: int
    layout: tuple | None = None  # (rows, cols) of every block product entry, see normal_layout

    @property
    def num_factors(self) -> int:
        return self.b.size // 3

    @cached_property
    def A(self) -> sp.csr_matrix:
        data, rows, cols = [], [], []
        k3 = np.arange(3)
        for fr, ids, B in self.groups:
            for a in range(ids.shape[1]):
                rr, cc = np.broadcast_arrays(
                    3 * fr[:, None, None] + k3[None, :, None],
                    3 * ids[:, a, None, None] + k3[None, None, :],
                )
                data.append(B[:, a].ravel())
                rows.append(rr.ravel())
                cols.append(cc.ravel())
        return sp.csr_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.b.size, 3 * self.num_poses),
        )

    @cached_property
    def pose_span(self) -> int:
        """Largest index gap between poses sharing a factor (sets the bandwidth of A^T A)."""
        spans = [int(np.max(ids.max(axis=1) - ids.min(axis=1))) for _, ids, _ in self.groups]
        return max(spans, default=0)

    @cached_property
    def gradient(self) -> np.ndarray:
        """A^T b; zero at a stationary point of the weighted objective."""
        bf = self.b.reshape(-1, 3)
        idx, vals = [], []
        for fr, ids, B in self.groups:
            idx.append((3 * ids[:, :, None] + np.arange(3)).ravel())
            vals.append(np.einsum("naji,nj->nai", B, bf[fr]).ravel())
        if not idx:
            return np.zeros(3 * self.num_poses)
        return np.bincount(np.concatenate(idx), np.concatenate(vals), minlength=3 * self.num_poses)

    def _entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Row, column and value of every 3x3 block product B_a^T B_c, duplicates included."""
        rows, cols = self.layout if self.layout is not None else normal_layout(
            [ids for _, ids, _ in self.groups])
        vals = [np.einsum("naji,ncjk->nacik", B, B).ravel() for _, _, B in self.groups]
        return rows, cols, np.concatenate(vals) if vals else np.zeros(0)

    def normal_matrix(self) -> np.ndarray:
        """Dense A^T A."""
        n = 3 * self.num_poses
        rows, cols, vals = self._entries()
        return np.bincount(rows * n + cols, vals, minlength=n * n).reshape(n, n)

    def normal_band(self, u: int) -> np.ndarray:
        """Upper band storage of A^T A with ``u`` superdiagonals (LAPACK layout).

        ``u`` must cover the band, i.e. u >= 3 * pose_span + 2.
        """
        n = 3 * self.num_poses
        rows, cols, vals = self._entries()
        # lower-triangle products repeat upper ones; send them to a spare bin
        pos = np.where(cols >= rows, (u + rows - cols) * n + cols, (u + 1) * n)
        return np.bincount(pos, vals, minlength=(u + 1) * n + 1)[:-1].reshape(u + 1, n)


def normal_layout(pose_ids) -> tuple[np.ndarray, np.ndarray]:
    """Scalar (row, column) in A^T A of every entry of every 3x3 product block.

    Order matches :meth:`SparseSystem._entries`: groups, then factors, then
    variable pairs (a, c), then the 3x3 entries row-major.
    """
    k3 = np.arange(3)
    rows, cols = [], []
    for ids in pose_ids:
        r = 3 * ids[:, :, None, None, None] + k3[:, None]  # (n, a, 1, i, 1)
        c = 3 * ids[:, None, :, None, None] + k3            # (n, 1, c, 1, k)
        r, c = np.broadcast_arrays(r, c)
        rows.append(r.ravel())
        cols.append(c.ravel())
    if not rows:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    return np.concatenate(rows), np.concatenate(cols)


def _stack(a, P: int) -> np.ndarray:
    return np.tile(a, (P, 1))


def batch_residuals(graph: FactorGraph, X) -> np.ndarray:
    """Residuals of P trajectories at once: X has shape (P, num_poses, 3), result (P, F, 3)."""
    ix = graph._index
    P = X.shape[0]
    r = np.empty((P, graph.num_factors, 3))
    if ix["gps_rows"].size:
        xs = X[:, ix["gps_var"]].reshape(-1, 3)
        r[:, ix["gps_rows"]] = _gps_res_zinv(xs, _stack(ix["gps_zinv"], P)).reshape(P, -1, 3)
    if ix["odom_rows"].size:
        p = ix["odom_prev"]
        xp, xc = X[:, p].reshape(-1, 3), X[:, p + 1].reshape(-1, 3)
        r[:, ix["odom_rows"]] = _odom_res_zinv(xp, xc, _stack(ix["odom_zinv"], P)).reshape(P, -1, 3)
    return r


def batch_jacobians(graph: FactorGraph, X) -> tuple:
    """Unwhitened Jacobian groups of P trajectories; blocks have shape (P, n, k, 3, 3)."""
    ix = graph._index
    P = X.shape[0]
    groups = []
    if ix["gps_rows"].size:
        xs = X[:, ix["gps_var"]].reshape(-1, 3)
        B = _fd_jacobians(_gps_res_zinv, [xs, _stack(ix["gps_zinv"], P)], (0,))
        groups.append((ix["gps_rows"], ix["gps_ids"], B.reshape(P, -1, 1, 3, 3)))
    if ix["odom_rows"].size:
        p = ix["odom_prev"]
        xp, xc = X[:, p].reshape(-1, 3), X[:, p + 1].reshape(-1, 3)
        B = _fd_jacobians(_odom_res_zinv, [xp, xc, _stack(ix["odom_zinv"], P)], (0, 1))
        groups.append((ix["odom_rows"], ix["odom_ids"], B.reshape(P, -1, 2, 3, 3)))
    return tuple(groups)


def linearize(graph: FactorGraph, x, theta: NoiseParams) -> SparseSystem:
    x = _check_states(graph, x)[None]
    r = batch_residuals(graph, x)[0]
    w = 1.0 / np.sqrt(graph.theta_rows(theta))
    groups = tuple((fr, ids, w[fr][:, None, :, None] * B[0])
                   for fr, ids, B in batch_jacobians(graph, x))
    b = -(w * r).ravel()
    return SparseSystem(groups, b, graph.num_poses, graph._index["layout"])


def condition_diagnostics(system: SparseSystem) -> dict[str, float]:
    """2-norm condition number of the whitened Jacobian (dense, small graphs only)."""
    if system.A.shape[1] > MAX_DENSE_COLUMNS:
        raise StructuralError(
            f"condition number needs a dense matrix; {system.A.shape[1]} columns exceeds "
            f"{MAX_DENSE_COLUMNS}"
        )
    sv = np.linalg.svd(system.A.toarray(), compute_uv=False)
    kappa = np.inf if sv[-1] == 0.0 else float(sv[0] / sv[-1])
    return {"kappa_A": kappa}
