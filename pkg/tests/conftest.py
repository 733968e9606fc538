import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from covlearn import lie, synth  # noqa: E402
from covlearn.graph import NoiseParams  # noqa: E402

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Call with (number, passed, detail); prints and keeps one line per criterion."""
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        print(line)
        request.config.stash[_ACCEPTANCE_KEY].append(line)
        return passed
    return record


def random_latent(rng, switched=False) -> dict:
    kinds = ["gps", "odom"]
    names = [synth.noise_class(k, p, switched) for k in kinds for p in ((0, 1) if switched else (0,))]
    out = {}
    for n in names:
        scale = 0.5 if n.startswith("gps") else 0.05
        out[n] = (scale * np.exp(rng.uniform(-1, 1, size=3))).tolist()
    return out


def random_trajectory(rng, length, latent=None, switched=False):
    latent = latent or random_latent(rng, switched)
    spec = synth.DatasetSpec(dataset_id="test", length=length, n_train=1, n_test=1,
                             latent=latent, switched=switched, segment_range=(2, 4))
    return synth.simulate_trajectory(spec, rng), NoiseParams(latent)


def noise_free(traj):
    """Same ground truth with exact measurements."""
    gt = traj.gt
    return synth.NavTrajectory(gt, lie.between(gt[:-1], gt[1:]).reshape(-1, 3), gt.copy(),
                               traj.p, traj.switched)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
