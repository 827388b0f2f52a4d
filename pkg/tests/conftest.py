from pathlib import Path

import numpy as np
import pytest

from nescl.interactions import InteractionDataset
from nescl.synthetic import block_dataset

DATA_DIR = Path(__file__).parent / "data"

# acceptance criteria append (name, passed, detail) here; printed at the end
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def tiny_dataset():
    # 4 users, 5 items, hand-written so every count is checkable by eye
    train = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2), (2, 3), (3, 4)]
    test = [(0, 3), (1, 0), (2, 4)]
    return InteractionDataset.from_pairs(4, 5, train, test)


@pytest.fixture(scope="session")
def block_data():
    return block_dataset(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
