import math
import sys

import numpy as np
import pytest
from hypothesis import settings

from drivecluster.data_model import AgentState, Frame, LaneMap, Pose2D, Sequence
from drivecluster.synth import default_templates, generate_dataset, rectangle

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def make_agent(aid, cx, cy, heading=0.0, v=(0.0, 0.0)):
    poly = rectangle(cx, cy, heading)
    return AgentState(aid, tuple((float(x), float(y)) for x, y in poly), tuple(map(float, v)))


def make_sequence(n=10, speed=5.0, agents_ahead=(), sid="s", dt=0.1):
    """Ego driving east from the origin, agents at fixed offsets ahead."""
    frames = []
    for k in range(n):
        x = speed * dt * k
        ags = tuple(make_agent(f"a{j}", x + gap, 0.0, v=(speed, 0.0)) for j, gap in enumerate(agents_ahead))
        frames.append(Frame(round(k * dt, 10), Pose2D(x, 0.0, 0.0), speed, ags))
    return Sequence(sid, tuple(frames), "m")


@pytest.fixture
def straight_map():
    return LaneMap(boundaries=(((-100.0, -1.75), (200.0, -1.75)), ((-100.0, 1.75), (200.0, 1.75))))


@pytest.fixture(scope="session")
def small_synth():
    return generate_dataset(default_templates(), 3, 11)


def random_pose(rng):
    return Pose2D(float(rng.uniform(-200, 200)), float(rng.uniform(-200, 200)),
                  float(math.remainder(rng.uniform(-4, 4), 2 * math.pi)) or 0.0)


def central_gradient(fn, x, eps=1e-6):
    """Central finite differences of a scalar function of a float64 array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = fn(x)
        flat[i] = keep - eps
        lo = fn(x)
        flat[i] = keep
        g[i] = (hi - lo) / (2 * eps)
    return grad


def assert_close_rel(analytic, numeric, rtol=1e-4):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    err = np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-12)
    assert err < rtol, f"relative gradient error {err:.2e}"


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
