import numpy as np
import pytest
from hypothesis import settings

from gpsdd.core import Dataset

settings.register_profile("ci", max_examples=25, deadline=None)
settings.load_profile("ci")


def toy_dataset(n=40, dim=1, seed=0, noise=0.1):
    g = np.random.default_rng(seed)
    X = g.uniform(-2, 2, size=(n, dim))
    y = np.sin(2 * X).sum(axis=1) + noise * g.standard_normal(n)
    return Dataset(X, y)


@pytest.fixture
def small_ds():
    return toy_dataset()


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; returns the verdict."""

    def report(number, name, passed, detail):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _CRITERIA.setdefault(number, []).append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            for line in _CRITERIA[k]:
                terminalreporter.write_line(line)
