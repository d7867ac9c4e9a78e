from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dino4d.scene import SceneConfig, generate  # noqa: E402


@pytest.fixture(scope="session")
def small_scene():
    """56x56, six frames: big enough for every code path, cheap to build."""
    return generate(SceneConfig(width=56, height=56, frames=6, num_objects=2, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[tuple[str, str, str]] = []


class Criterion:
    """Records one acceptance verdict; the summary hook prints them in order."""

    def __init__(self, name: str):
        self.name = name

    def report(self, ok: bool, detail: str) -> bool:
        ACCEPTANCE.append(("PASS" if ok else "FAIL", self.name, detail))
        return ok


@pytest.fixture
def criterion():
    return Criterion


def pytest_runtest_logreport(report):
    if report.when == "setup" and report.skipped and "test_acceptance" in report.nodeid:
        ACCEPTANCE.append(("SKIP", report.nodeid.split("::")[-1], str(report.longrepr[-1])))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for verdict, name, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{verdict:4s}  {name}: {detail}")
