import numpy as np
import pytest

from forgelab.data import gen_synthetic
from forgelab.nn import FcnArchitecture
from forgelab.trace import TrainConfig, train


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    return gen_synthetic(0, 300, 16, 3)


@pytest.fixture(scope="session")
def small_trace(small_dataset):
    cfg = TrainConfig(0.05, 20, 16, 0, FcnArchitecture((16, 8, 3)))
    return train(small_dataset, cfg)


_ACCEPTANCE = {}


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title = number, title
        self.failures, self.notes = [], []

    def check(self, ok, detail):
        (self.notes if ok else self.failures).append(detail)
        return ok


@pytest.fixture
def criterion(request):
    """Context factory: ``with criterion(3, "title") as c: c.check(cond, "detail")``."""
    from contextlib import contextmanager

    @contextmanager
    def run(number, title):
        c = _Criterion(number, title)
        try:
            yield c
        except Exception as exc:
            c.failures.append(f"{type(exc).__name__}: {exc}")
        status = "FAIL" if c.failures else "PASS"
        detail = "; ".join(c.failures or c.notes)
        line = f"[{status}] criterion {number:>2} {title}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        assert not c.failures, line

    return run


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
