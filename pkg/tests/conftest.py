import numpy as np
import pytest
from hypothesis import settings, strategies as st

from sweeplio.geometry import State, quat_normalize

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def unit_quats():
    return st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4).filter(
        lambda v: np.linalg.norm(v) > 0.1).map(lambda v: quat_normalize(np.array(v)))


def vec3(scale=10.0):
    return st.lists(st.floats(-scale, scale, allow_nan=False), min_size=3, max_size=3).map(np.array)


def random_state(rng, t=0.0, scale=1.0):
    q = quat_normalize(rng.normal(size=4))
    return State(rng.normal(size=3) * scale, q, rng.normal(size=3) * scale,
                 rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.01, t)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" not in rep.nodeid or rep.when != "call":
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                lines.append((props["criterion"], rep.nodeid,
                              f"{'PASS' if rep.passed else 'FAIL'} criterion {props['criterion']:>2}: "
                              f"{props['detail']}"))
            else:
                lines.append((99, rep.nodeid, f"FAIL {rep.nodeid.split('::')[-1]}: no result recorded"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, _, line in sorted(lines):
            terminalreporter.write_line(line)
