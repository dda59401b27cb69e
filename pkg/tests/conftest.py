from pathlib import Path

import numpy as np
import pytest

from misboost.data import Bag, Dataset

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_dataset():
    return Dataset((
        Bag("a", [[0.0, 0.0], [1.0, 0.5]], 1),
        Bag("b", [[4.0, 4.0]], -1),
        Bag("c", [[0.2, 0.1], [5.0, 5.0], [3.0, 1.0]], 1),
        Bag("d", [[6.0, 2.0], [4.5, 4.2]], -1),
    ), 2)


def random_dataset(rng, n_bags=12, d=3, max_inst=6):
    bags = []
    for i in range(n_bags):
        n = int(rng.integers(1, max_inst + 1))
        bags.append(Bag(f"b{i}", rng.normal(size=(n, d)), 1 if i % 2 == 0 else -1))
    return Dataset(tuple(bags), d)


_CRITERIA = []


@pytest.fixture
def record_criterion():
    """Record one acceptance line; all lines are echoed in the terminal summary."""
    def record(label, passed, detail):
        line = f"criterion {label}: {'PASS' if passed else 'FAIL'} | {detail}"
        _CRITERIA.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
