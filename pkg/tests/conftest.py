import os
import sys
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

src_dir = Path(__file__).resolve().parent.parent / "src"
sys.path.insert(0, str(src_dir))

from layer_rsa.types import ConditionSet, Measure, RDM  # noqa: E402

RUN_SLOW = os.environ.get("RSA_RUN_SLOW") == "1"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size runs, enabled with RSA_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="set RSA_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def make_conditions(n: int) -> ConditionSet:
    return ConditionSet(tuple(f"c{i:03d}" for i in range(n)))


def make_rdm(rng, n: int, label: str = "m:1", measure: Measure = Measure.euclidean) -> RDM:
    """Random symmetric dissimilarities with a zero diagonal."""
    upper = np.triu(rng.random((n, n)), k=1)
    return RDM(make_conditions(n), measure, upper + upper.T, label=label)


@pytest.fixture
def random_rdm(rng):
    def factory(n: int, label: str = "m:1") -> RDM:
        return make_rdm(rng, n, label)

    return factory


def tau_a_counts_oracle(x, y) -> tuple[int, int]:
    """(C - D, n (n - 1) / 2) by pair enumeration."""
    numerator = 0
    for i, j in combinations(range(len(x)), 2):
        s = np.sign(x[i] - x[j]) * np.sign(y[i] - y[j])
        numerator += int(s)
    n = len(x)
    return numerator, n * (n - 1) // 2


def tau_a_oracle(x, y) -> float:
    numerator, total = tau_a_counts_oracle(x, y)
    return numerator / total


def average_ranks_oracle(values) -> np.ndarray:
    """1-based ranks, ties get the mean of the ranks they span."""
    values = list(values)
    ranks = np.empty(len(values))
    for i, v in enumerate(values):
        below = sum(1 for w in values if w < v)
        equal = sum(1 for w in values if w == v)
        ranks[i] = below + (equal + 1) / 2
    return ranks


def pearson_oracle(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mx = sum(x) / len(x)
    my = sum(y) / len(y)
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / np.sqrt(sxx * syy)


def spearman_oracle(x, y) -> float:
    return pearson_oracle(average_ranks_oracle(x), average_ranks_oracle(y))
