import numpy as np
import pytest

from dfnet import tensor as T


@pytest.fixture
def f64():
    with T.float64_mode():
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def weighted_sum(out: T.Tensor, seed: int = 0) -> T.Tensor:
    """Reduce with fixed random weights so the gradient is not trivially constant."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return T.tsum(out * T.Tensor(w, dtype=out.dtype))


_REPORT: dict = {}


@pytest.fixture
def acceptance_report():
    """Numbers measured by acceptance tests, printed in the terminal summary."""
    return _REPORT


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance measurements")
    for name, values in _REPORT.items():
        body = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in values.items())
        terminalreporter.write_line(f"{name}: {body}")
