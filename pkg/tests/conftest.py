import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def brute_force_acc(y_true, y_pred):
    """Best accuracy over every one-to-one cluster-to-class assignment, by enumeration."""
    y_true, y_pred = list(map(int, y_true)), list(map(int, y_pred))
    classes, clusters = sorted(set(y_true)), sorted(set(y_pred))
    size = max(len(classes), len(clusters))
    counts = [[0] * size for _ in range(size)]
    for t, p in zip(y_true, y_pred):
        counts[clusters.index(p)][classes.index(t)] += 1
    best = max(sum(counts[r][c] for r, c in enumerate(perm)) for perm in itertools.permutations(range(size)))
    return best / len(y_true)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
