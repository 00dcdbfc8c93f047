import numpy as np
import pytest
from hypothesis import settings

# fixed example streams keep the suite reproducible run to run
settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")

from tcul.core import Dataset


def make_dataset(n=3, d=4, seed=0, role="target_train", identities=True):
    rng = np.random.default_rng(seed)
    return Dataset(
        features=rng.normal(size=(n, d)),
        sample_ids=np.arange(n),
        camera_ids=rng.integers(0, 3, size=n),
        frame_ids=rng.integers(0, 1000, size=n),
        identities=rng.integers(0, 5, size=n) if identities else np.full(n, -1),
        role=role,
    )


@pytest.fixture
def small_dataset():
    return make_dataset()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
