import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from slr.dataset import load_csv  # noqa: E402
from synth import full_dataset_csv, synthetic_dataset  # noqa: E402


@pytest.fixture(scope="session")
def full_csv(tmp_path_factory):
    """(path, source) of the 27,455-row CSV: the published file if configured, else the stand-in."""
    return full_dataset_csv(tmp_path_factory.mktemp("full"))


@pytest.fixture(scope="session")
def full_data(full_csv):
    path, source = full_csv
    return load_csv(path), source


@pytest.fixture(scope="session")
def small_data():
    return synthetic_dataset(600, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
