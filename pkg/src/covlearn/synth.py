"""Synthetic planar navigation datasets with GPS and odometry measurements.

Four presets mirror the navigation benchmarks D1-D4: D1/D2 use fixed noise
levels, D3/D4 switch noise levels with a binary indoor/outdoor flag ``p``
that holds for random-length segments. Every trajectory draws from its own
child of a master ``SeedSequence``, so a dataset is a pure function of its
:class:`DatasetSpec`.

Dataset files are JSON::

    {
      "schema": "covlearn.dataset/1",
      "spec": {...DatasetSpec fields...},
      "train": [{"rows": [[t, [x, y, th], [gps x, y, th], [odom x, y, th] | null, p], ...]}, ...],
      "test":  [...]
    }

``odom`` on row ``t`` is the relative measurement from pose ``t-1`` to pose
``t`` and is ``null`` on row 0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import lie
from .graph import GPS, ODOM, Factor, FactorGraph, NoiseParams, ParameterDomainError, StructuralError

DATASET_SCHEMA = "covlearn.dataset/1"

PRESET_LATENTS = {
    "D1": {"gps": [0.5, 0.5, 0.1], "odom": [0.05, 0.05, 0.01]},
    "D2": {"gps": [2.0, 2.0, 0.4], "odom": [0.1, 0.1, 0.02]},
    "D3": {
        "gps@p=0": [0.1, 0.1, 0.02],
        "gps@p=1": [1.0, 1.0, 0.2],
        "odom@p=0": [0.05, 0.05, 0.01],
        "odom@p=1": [0.05, 0.05, 0.01],
    },
    "D4": {
        "gps@p=0": [0.3, 0.3, 0.06],
        "gps@p=1": [3.0, 3.0, 0.6],
        "odom@p=0": [0.08, 0.08, 0.03],
        "odom@p=1": [0.15, 0.15, 0.05],
    },
}


def noise_class(kind: str, p: int, switched: bool) -> str:
    return f"{kind}@p={int(p)}" if switched else kind


@dataclass(frozen=True)
class DatasetSpec:
    dataset_id: str = "D1"
    length: int = 100
    n_train: int = 5
    n_test: int = 20
    latent: dict = field(default_factory=lambda: dict(PRESET_LATENTS["D1"]))
    switched: bool = False
    segment_range: tuple = (10, 30)
    forward_range: tuple = (0.5, 1.5)
    heading_sigma: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.length < 1 or self.n_train < 1 or self.n_test < 1:
            raise ParameterDomainError("trajectory length and split counts must be >= 1")
        lo, hi = self.segment_range
        if not 1 <= lo <= hi:
            raise ParameterDomainError(f"bad segment range {self.segment_range}")
        latent = {k: [float(v) for v in vals] for k, vals in self.latent.items()}
        NoiseParams(latent)  # positivity and shape
        want = {noise_class(k, p, self.switched) for k in (GPS, ODOM)
                for p in ((0, 1) if self.switched else (0,))}
        if set(latent) != want:
            raise ParameterDomainError(
                f"latent classes {sorted(latent)} do not match expected {sorted(want)}"
            )
        object.__setattr__(self, "latent", latent)
        object.__setattr__(self, "segment_range", tuple(int(v) for v in self.segment_range))
        object.__setattr__(self, "forward_range", tuple(float(v) for v in self.forward_range))

    @classmethod
    def preset(cls, dataset_id: str, **overrides) -> "DatasetSpec":
        if dataset_id not in PRESET_LATENTS:
            raise ParameterDomainError(f"unknown preset {dataset_id!r}")
        kw = dict(
            dataset_id=dataset_id,
            latent={k: list(v) for k, v in PRESET_LATENTS[dataset_id].items()},
            switched=dataset_id in ("D3", "D4"),
        )
        kw.update(overrides)
        return cls(**kw)

    @property
    def latent_theta(self) -> NoiseParams:
        return NoiseParams(self.latent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["segment_range"] = list(self.segment_range)
        d["forward_range"] = list(self.forward_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        base = cls.preset(d["dataset_id"]) if d.get("dataset_id") in PRESET_LATENTS else None
        if base is not None:
            for k in ("latent", "switched"):
                d.setdefault(k, getattr(base, k))
        for k in ("segment_range", "forward_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class NavTrajectory:
    gt: np.ndarray
    odom: np.ndarray
    gps: np.ndarray
    p: np.ndarray
    switched: bool = False

    def __post_init__(self):
        self.gt = np.asarray(self.gt, dtype=float).reshape(-1, 3)
        T = len(self.gt)
        self.odom = np.asarray(self.odom, dtype=float).reshape(-1, 3)
        self.gps = np.asarray(self.gps, dtype=float).reshape(-1, 3)
        self.p = np.asarray(self.p, dtype=int).reshape(-1)
        if self.odom.shape[0] != T - 1 or self.gps.shape[0] != T or self.p.shape[0] != T:
            raise StructuralError("measurement counts do not match trajectory length")

    @property
    def length(self) -> int:
        return len(self.gt)

    def to_rows(self) -> list:
        rows = []
        for t in range(self.length):
            odom = None if t == 0 else self.odom[t - 1].tolist()
            rows.append([t, self.gt[t].tolist(), self.gps[t].tolist(), odom, int(self.p[t])])
        return rows

    @classmethod
    def from_rows(cls, rows, switched: bool) -> "NavTrajectory":
        if not rows:
            raise StructuralError("trajectory without rows")
        if [r[0] for r in rows] != list(range(len(rows))):
            raise StructuralError("trajectory rows must be numbered 0..T-1")
        if rows[0][3] is not None or any(r[3] is None for r in rows[1:]):
            raise StructuralError("odometry must be null on row 0 and present afterwards")
        return cls(
            gt=[r[1] for r in rows],
            gps=[r[2] for r in rows],
            odom=[r[3] for r in rows[1:]],
            p=[r[4] for r in rows],
            switched=switched,
        )


@dataclass
class Dataset:
    spec: DatasetSpec
    train: list
    test: list

    def to_json(self) -> str:
        doc = {
            "schema": DATASET_SCHEMA,
            "spec": self.spec.to_dict(),
            "train": [{"rows": t.to_rows()} for t in self.train],
            "test": [{"rows": t.to_rows()} for t in self.test],
        }
        return json.dumps(doc, indent=1) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        doc = json.loads(text)
        if doc.get("schema") != DATASET_SCHEMA:
            raise StructuralError(f"unsupported dataset schema {doc.get('schema')!r}")
        spec = DatasetSpec.from_dict(doc["spec"])
        load = lambda items: [NavTrajectory.from_rows(t["rows"], spec.switched) for t in items]
        return cls(spec, load(doc["train"]), load(doc["test"]))

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_json(Path(path).read_text())


def generate_gt(length: int, rng: np.random.Generator, forward_range=(0.5, 1.5),
                heading_sigma: float = 0.15) -> np.ndarray:
    """Random-walk trajectory from the origin: drive forward, then turn."""
    lo, hi = forward_range
    fwd = rng.uniform(lo, hi, size=length - 1)
    turn = rng.normal(0.0, heading_sigma, size=length - 1)
    poses = np.zeros((length, 3))
    for t in range(1, length):
        poses[t] = lie.compose(poses[t - 1], [fwd[t - 1], 0.0, turn[t - 1]])
    return poses


def switching_schedule(length: int, rng: np.random.Generator, segment_range=(10, 30)) -> np.ndarray:
    lo, hi = segment_range
    p = np.empty(length, dtype=int)
    state = int(rng.integers(2))
    t = 0
    while t < length:
        n = int(rng.integers(lo, hi + 1))
        p[t:t + n] = state
        state ^= 1
        t += n
    return p


def _tangent_noise(rng, variances) -> np.ndarray:
    return rng.normal(size=variances.shape) * np.sqrt(variances)


def simulate_measurements(gt, latent: NoiseParams, p, rng: np.random.Generator,
                          switched: bool = False):
    """Noisy (odometry, gps) for a ground-truth trajectory.

    Tangent noise drawn from N(0, diag(theta)) is applied with the left plus,
    z = Exp(n) o z_true, using the class selected by each step's flag ``p``
    (odometry into pose t uses ``p[t]``).
    """
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    p = np.asarray(p, dtype=int)
    var_odom = np.array([latent[noise_class(ODOM, pt, switched)] for pt in p[1:]]).reshape(-1, 3)
    var_gps = np.array([latent[noise_class(GPS, pt, switched)] for pt in p])
    rel = lie.between(gt[:-1], gt[1:]).reshape(-1, 3)
    odom = lie.oplus(_tangent_noise(rng, var_odom), rel).reshape(-1, 3)
    gps = lie.oplus(_tangent_noise(rng, var_gps), gt)
    return odom, gps


def simulate_trajectory(spec: DatasetSpec, rng: np.random.Generator) -> NavTrajectory:
    if spec.switched:
        p = switching_schedule(spec.length, rng, spec.segment_range)
    else:
        p = np.zeros(spec.length, dtype=int)
    gt = generate_gt(spec.length, rng, spec.forward_range, spec.heading_sigma)
    odom, gps = simulate_measurements(gt, spec.latent_theta, p, rng, spec.switched)
    return NavTrajectory(gt, odom, gps, p, spec.switched)


def make_dataset(spec: DatasetSpec) -> Dataset:
    streams = np.random.SeedSequence(spec.seed).spawn(spec.n_train + spec.n_test)
    trajs = [simulate_trajectory(spec, np.random.default_rng(s)) for s in streams]
    return Dataset(spec, trajs[:spec.n_train], trajs[spec.n_train:])


def build_graph(traj: NavTrajectory) -> FactorGraph:
    factors = [Factor.gps(t, traj.gps[t], noise_class(GPS, traj.p[t], traj.switched))
               for t in range(traj.length)]
    factors += [Factor.odom(t, traj.odom[t - 1], noise_class(ODOM, traj.p[t], traj.switched))
                for t in range(1, traj.length)]
    return FactorGraph(traj.length, tuple(factors))


def far_initialization(latent: NoiseParams, lower: float = 0.1, upper: float = 10.0) -> NoiseParams:
    """Latent noise levels with the GPS and odometry magnitudes swapped.

    The result is rescaled to geometric mean sqrt(lower * upper) and clipped
    into [lower, upper], so it is feasible for the given box.
    """
    swapped = {}
    for name in latent.classes:
        kind, _, suffix = name.partition("@")
        other = (ODOM if kind == GPS else GPS) + ("@" + suffix if suffix else "")
        swapped[name] = latent[other]
    v = NoiseParams(swapped).to_vector()
    v = v * np.sqrt(lower * upper) / np.exp(np.mean(np.log(v)))
    return NoiseParams.from_vector(latent.classes, np.clip(v, lower, upper))
