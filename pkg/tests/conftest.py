import numpy as np
import pytest

from raypos.scene import SceneGenConfig, generate_clutter_scene

# (criterion number, "CRITERION n: PASS/FAIL - detail") entries, echoed
# after the run summary (pytest's capture swallows in-test prints)
ACCEPTANCE_LINES: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(set(ACCEPTANCE_LINES)):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def empty_room():
    return generate_clutter_scene(SceneGenConfig(clutter_count=0, seed=0))


@pytest.fixture(scope="session")
def clutter_room():
    return generate_clutter_scene(SceneGenConfig(clutter_count=20, seed=11))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
