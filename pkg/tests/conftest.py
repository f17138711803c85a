import numpy as np
import pytest

from mfmeta.fixtures import bistable_model

_VERDICTS = []


class Verdicts:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def record(self, number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append((number, line))
        print(line)


@pytest.fixture
def verdict():
    return Verdicts()


@pytest.fixture(scope="session")
def bistable():
    return bistable_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS):
        terminalreporter.write_line(line)
