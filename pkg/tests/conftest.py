import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def r():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion; echoed in the summary."""
    def emit(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
