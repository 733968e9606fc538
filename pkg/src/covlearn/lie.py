"""SE(2) group operations with the left-plus convention.

Poses are (x, y, theta) triples and tangent vectors are (dx, dy, dtheta)
triples in se(2). Every array function accepts a single triple of shape (3,)
or a stack of shape (N, 3) and broadcasts, so solvers can evaluate whole
trajectories at once. :class:`SE2Pose` wraps a single triple for callers who
prefer a value type.

Conventions:
    tau (+) Y = Exp(tau) o Y
    Y1 (-) Y2 = Log(Y1 o Y2^-1)

Headings are normalized to (-pi, pi] on every construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8


def wrap_angle(theta):
    """Map angles to (-pi, pi]. Values already in range pass through untouched."""
    theta = np.asarray(theta, dtype=float)
    outside = (theta > np.pi) | (theta <= -np.pi)
    if outside.any():
        theta = np.where(outside, np.pi - np.mod(np.pi - theta, 2.0 * np.pi), theta)
    return theta if theta.ndim else float(theta)


def _pack(x, y, th) -> np.ndarray:
    out = np.empty(np.shape(th) + (3,))
    out[..., 0] = x
    out[..., 1] = y
    out[..., 2] = th
    return out


def _as_triples(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape[-1] != 3:
        raise ValueError(f"expected trailing dimension 3, got shape {a.shape}")
    return a


def _v_coeffs(w):
    """Entries (sin w / w, (1 - cos w) / w) of the SE(2) V matrix."""
    small = np.abs(w) < SMALL_ANGLE
    safe = np.where(small, 1.0, w)
    s = np.where(small, 1.0 - w * w / 6.0, np.sin(safe) / safe)
    c = np.where(small, 0.5 * w, 2.0 * np.sin(0.5 * safe) ** 2 / safe)
    return s, c


def exp(tau):
    """Exponential map se(2) -> SE(2)."""
    tau = _as_triples(tau)
    vx, vy, w = tau[..., 0], tau[..., 1], tau[..., 2]
    s, c = _v_coeffs(w)
    x = s * vx - c * vy
    y = c * vx + s * vy
    return _pack(x, y, wrap_angle(w))


def log(pose):
    """Logarithm SE(2) -> se(2) on the principal branch.

    A heading of exactly -pi is first normalized to +pi, so both ends of the
    branch cut land on the +pi side.
    """
    pose = _as_triples(pose)
    return log_parts(pose[..., 0], pose[..., 1], pose[..., 2])


def log_parts(x, y, th):
    """:func:`log` of the pose given as separate coordinate arrays."""
    w = wrap_angle(th)
    small = np.abs(w) < SMALL_ANGLE
    safe = np.where(small, 1.0, w)
    # V^-1 = [[a, b], [-b, a]], a = (w/2) cot(w/2)
    half = 0.5 * safe
    a = np.where(small, 1.0 - w * w / 12.0, half * np.cos(half) / np.sin(half))
    b = 0.5 * w
    return _pack(a * x + b * y, -b * x + a * y, w)


def left_jacobian(tau) -> np.ndarray:
    """Left Jacobian of Exp: Exp(tau + d) ~= Exp(J d) o Exp(tau). Shape (..., 3, 3)."""
    tau = _as_triples(tau)
    r1, r2, w = tau[..., 0], tau[..., 1], tau[..., 2]
    s, c = _v_coeffs(w)
    # (w - sin w) / w^2 cancels badly for small w, so use its series there
    series = np.abs(w) < 1e-2
    safe = np.where(series, 1.0, w)
    w2 = w * w
    a = np.where(series, w / 6.0 * (1.0 - w2 / 20.0 * (1.0 - w2 / 42.0)),
                 (safe - np.sin(safe)) / safe**2)
    tiny = np.abs(w) < SMALL_ANGLE
    half = np.where(tiny, 1.0, 0.5 * w)
    b = np.where(tiny, 0.5 - w2 / 24.0, 0.5 * (np.sin(half) / half) ** 2)
    j02 = r1 * a + r2 * b
    j12 = -r1 * b + r2 * a
    J = np.zeros(tau.shape[:-1] + (3, 3))
    J[..., 0, 0] = s
    J[..., 0, 1] = -c
    J[..., 1, 0] = c
    J[..., 1, 1] = s
    J[..., 0, 2] = j02
    J[..., 1, 2] = j12
    J[..., 2, 2] = 1.0
    return J


def compose(a, b):
    """Group product a o b."""
    a = _as_triples(a)
    b = _as_triples(b)
    ca, sa = np.cos(a[..., 2]), np.sin(a[..., 2])
    x = a[..., 0] + ca * b[..., 0] - sa * b[..., 1]
    y = a[..., 1] + sa * b[..., 0] + ca * b[..., 1]
    return _pack(x, y, wrap_angle(a[..., 2] + b[..., 2]))


def inverse(p):
    p = _as_triples(p)
    c, s = np.cos(p[..., 2]), np.sin(p[..., 2])
    x = -(c * p[..., 0] + s * p[..., 1])
    y = -(-s * p[..., 0] + c * p[..., 1])
    return _pack(x, y, wrap_angle(-p[..., 2]))


def between(a, b):
    """Relative pose a^-1 o b."""
    return compose(inverse(a), b)


def oplus(tau, p):
    """Left retraction Exp(tau) o p."""
    return compose(exp(tau), p)


def ominus(a, b):
    """Left difference Log(a o b^-1), so that oplus(ominus(a, b), b) == a."""
    return log(compose(a, inverse(b)))


def to_matrix(p) -> np.ndarray:
    """Homogeneous 3x3 matrix of a single pose."""
    x, y, th = _as_triples(p)
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, -s, x], [s, c, y], [0.0, 0.0, 1.0]])


def from_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.array([m[0, 2], m[1, 2], wrap_angle(np.arctan2(m[1, 0], m[0, 0]))])


@dataclass(frozen=True)
class SE2Pose:
    """Planar rigid transform; ``theta`` is kept in (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", float(wrap_angle(self.theta)))

    @classmethod
    def identity(cls) -> "SE2Pose":
        return cls()

    @classmethod
    def from_array(cls, a) -> "SE2Pose":
        x, y, th = _as_triples(a)
        return cls(x, y, th)

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def __array__(self, dtype=None, copy=None):
        return self.to_array() if dtype is None else self.to_array().astype(dtype)

    def __matmul__(self, other: "SE2Pose") -> "SE2Pose":
        return SE2Pose.from_array(compose(self.to_array(), np.asarray(other)))

    def inverse(self) -> "SE2Pose":
        return SE2Pose.from_array(inverse(self.to_array()))

    def log(self) -> np.ndarray:
        return log(self.to_array())

    @classmethod
    def exp(cls, tau) -> "SE2Pose":
        return cls.from_array(exp(tau))

    def __iter__(self):
        return iter((self.x, self.y, self.theta))
