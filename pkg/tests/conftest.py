import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=1000,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def staircase_frame():
    """Noise-free default staircase at 640x480: (depth, truth, K, pose)."""
    from planarmap.scenegen import Scene, default_intrinsics, default_pose, render_depth

    K = default_intrinsics(640, 480)
    pose = default_pose()
    depth, gt = render_depth(Scene(), pose, K)
    return depth, gt, K, pose


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, taken from the tests' recorded properties."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", "call") != "call" and outcome != "error":
                continue
            for key, value in getattr(rep, "user_properties", []):
                if key == "criterion":
                    lines.append((value[0], "PASS" if outcome == "passed" else "FAIL", value[1]))
    if lines:
        terminalreporter.section("acceptance criteria")
        for n, status, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
