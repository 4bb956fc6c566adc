import numpy as np
import pytest

from rdcl.config import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Small but complete configuration for pipeline-level tests."""
    return TrainConfig(epochs=1, batch_size=4, n_train=16, n_val=8, T=4, d=6, d_lat=3, hidden=4,
                       k=3, probe=False)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
