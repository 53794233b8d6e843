import numpy as np
import pytest
import torch

from wmnseg import phantom
from wmnseg.preprocess import contrast_stretch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def default_phantom():
    return phantom.generate_phantom(phantom.PhantomSpec(seed=3))


@pytest.fixture(scope="session")
def stretched_phantom(default_phantom):
    mprage, wmn, labels, brain = default_phantom
    return contrast_stretch(mprage, brain), contrast_stretch(wmn, brain), labels, brain


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``."""

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
        _CRITERIA[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
