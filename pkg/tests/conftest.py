import numpy as np
import pytest

from refvsr.data import synth_triplet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_triplet():
    """64x96 clip of 4 frames; tele FoV is 16x24 uw pixels."""
    return synth_triplet(7, frames=4, size=(64, 96), motion=2.0)


@pytest.fixture(scope="session")
def mid_triplet():
    """128x192 clip, big enough for 32 px pre-training crops."""
    return synth_triplet(11, frames=4, size=(128, 192), motion=2.0)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion for the run summary."""
    def record(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
