from __future__ import annotations

import pytest

from objmatch.correspond import Dataset
from objmatch.experiment import build_scenes
from objmatch.scenegen import SceneGenConfig

SMALL = SceneGenConfig(views=4)


@pytest.fixture(scope="session")
def small_scenes():
    """Three sim and three pseudo-real scenes with four 64x64 views each."""
    return build_scenes(SMALL, 3)


@pytest.fixture()
def small_dataset(small_scenes):
    return Dataset(small_scenes)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
