import os

import numpy as np
import pytest

from mms.model import init_params
from mms.synth import make_dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run experiments marked slow (several CPU hours)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow") or os.environ.get("MMS_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow experiment; use --runslow or MMS_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def tiny_params():
    return init_params("tiny-desk", seed=3)


@pytest.fixture(scope="session")
def words():
    samples, _ = make_dataset(8, seed=5)
    return samples


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA = {}


@pytest.fixture
def criterion():
    """Record a one-line pass/fail verdict for an acceptance criterion."""
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
