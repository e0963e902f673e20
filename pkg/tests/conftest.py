import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hct import tensor as T

settings.register_profile("hct", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("hct")


@pytest.fixture(autouse=True)
def _float64():
    T.set_default_dtype("float64")
    T.set_finite_checks(True)
    yield
    T.set_default_dtype("float64")
    T.set_finite_checks(True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS: list[str] = []


@pytest.fixture
def criterion():
    """Record a one-line PASS/FAIL verdict for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        _VERDICTS.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
