import numpy as np
import pytest

from flapsim.model import N_JOINTS, SimState, build_default_model
from flapsim.spatial import quat_normalize


def random_state(rng, batch=(), model=None, speed=3.0, rate=3.0):
    """Random kinematic state with joints inside their limits."""
    model = model or build_default_model()
    arr = model.arrays
    shape = tuple(batch) if not np.isscalar(batch) else (batch,)
    return SimState(
        base_position=rng.normal(0, 1, shape + (3,)),
        base_orientation=quat_normalize(rng.normal(size=shape + (4,))),
        base_linear_velocity=rng.normal(0, speed, shape + (3,)),
        base_angular_velocity=rng.normal(0, rate, shape + (3,)),
        joint_positions=rng.uniform(arr.lower, arr.upper, shape + (N_JOINTS,)),
        joint_velocities=rng.normal(0, 5 * rate, shape + (N_JOINTS,)),
        time=0.0,
        prev_acceleration=rng.normal(0, 10, shape + (6 + N_JOINTS,)),
    )


def pendulum_model():
    """Fixed base, undamped joints and limits wide enough never to engage."""
    wide = 10.0
    m = build_default_model(joint_damping=(0.0,) * N_JOINTS, flap_limit=wide, pitch_limit=wide, tail_limit=wide)
    return m.replace(fixed_base=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def model():
    return build_default_model()



_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or (report.when != "call" and report.passed):
        return
    n = m.args[0]
    _CRITERIA[n] = _CRITERIA.get(n, True) and report.passed and not report.skipped


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if _CRITERIA[n] else 'FAIL'}")
