"""Reference computations that share no code with the package.

Values used as frozen expectations come from :func:`freeze`; the frozen
file lives next to this module and the tests also re-run the oracles to
confirm it has not drifted.
"""

import itertools
import json
from pathlib import Path

import numpy as np
import scipy.linalg

FROZEN = Path(__file__).with_name("data") / "lie_oracle.json"

# tangent vectors and poses used for frozen exp/log values
FROZEN_TANGENTS = [
    [1.0, 0.0, np.pi / 2],
    [0.3, -0.7, 0.4],
    [-2.0, 1.5, -2.9],
    [0.0, 0.0, 3.0],
    [5.0, -1.0, 1e-5],
    [0.2, 0.1, -1.2],
]


def hat(tau):
    vx, vy, w = tau
    return np.array([[0.0, -w, vx], [w, 0.0, vy], [0.0, 0.0, 0.0]])


def pose_matrix(p):
    x, y, th = p
    return np.array([[np.cos(th), -np.sin(th), x], [np.sin(th), np.cos(th), y], [0.0, 0.0, 1.0]])


def matrix_pose(m):
    return np.array([m[0, 2], m[1, 2], np.arctan2(m[1, 0], m[0, 0])])


def expm_exp(tau):
    return matrix_pose(scipy.linalg.expm(hat(tau)))


def rk4_exp(tau, steps=2000):
    """Integrate dg/dt = g hat(tau) from g(0) = I to t = 1 with classical RK4."""
    X = hat(tau)
    g = np.eye(3)
    h = 1.0 / steps
    for _ in range(steps):
        k1 = g @ X
        k2 = (g + 0.5 * h * k1) @ X
        k3 = (g + 0.5 * h * k2) @ X
        k4 = (g + h * k3) @ X
        g = g + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return matrix_pose(g)


def logm_log(p):
    L = np.real(scipy.linalg.logm(pose_matrix(p)))
    return np.array([L[0, 2], L[1, 2], L[1, 0]])


def compose_oracle(a, b):
    return matrix_pose(pose_matrix(a) @ pose_matrix(b))


def inverse_oracle(p):
    return matrix_pose(np.linalg.inv(pose_matrix(p)))


def damped_step_oracle(A, b, damping=0.0):
    """argmin ||A d - b||^2 + damping ||d||^2 via the pseudo-inverse of the stacked system."""
    n = A.shape[1]
    stacked = np.vstack([A, np.sqrt(damping) * np.eye(n)])
    rhs = np.concatenate([b, np.zeros(n)])
    return np.linalg.pinv(stacked) @ rhs


def box_vertex_oracle(grad, lower, upper):
    """Minimize s^T grad over all 2^n box vertices; ties go to the earliest (lowest) vertex."""
    best, best_val = None, np.inf
    for pick in itertools.product((0, 1), repeat=len(grad)):
        s = np.where(np.array(pick) == 1, upper, lower)
        val = float(s @ grad)
        if best is None or val < best_val - 1e-15 * max(1.0, abs(best_val)):
            best, best_val = s, val
    return best, best_val


def weighted_mean(z1, z2, w1, w2):
    """Minimizer of (x - z1)^2 / w1 + (x - z2)^2 / w2 and its derivatives in w1, w2."""
    x = (w2 * z1 + w1 * z2) / (w1 + w2)
    dx_dw1 = (z2 - z1) * w2 / (w1 + w2) ** 2
    dx_dw2 = (z1 - z2) * w1 / (w1 + w2) ** 2
    return x, dx_dw1, dx_dw2


def freeze(path=FROZEN):
    doc = {
        "tangents": FROZEN_TANGENTS,
        "exp_rk4": [rk4_exp(np.array(t)).tolist() for t in FROZEN_TANGENTS],
    }
    doc["log_logm"] = [logm_log(np.array(p)).tolist() for p in doc["exp_rk4"]]
    path.parent.mkdir(exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return doc


def load_frozen(path=FROZEN):
    return json.loads(path.read_text())


if __name__ == "__main__":
    freeze()
