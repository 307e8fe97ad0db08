import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from graphre.graph import Graph

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data"

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

os.environ.setdefault("GRAPHRE_DATA_DIR", str(DATA))

# one line per acceptance criterion, filled by tests/test_acceptance.py
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


def random_graph(n, p, seed, classes=2, features=None):
    rng = np.random.default_rng(seed)
    iu, iv = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    labels = rng.integers(0, classes, size=n)
    labels[:min(classes, n)] = np.arange(min(classes, n))
    feats = features if features is not None else rng.random((n, 4))
    return Graph.build(n, np.column_stack([iu[keep], iv[keep]]), feats, labels, classes)


def two_cliques(size=10, bridge=True):
    """Two ``size``-cliques with one-hot community features, joined by one bridge edge."""
    n = 2 * size
    edges = []
    for base in (0, size):
        edges += [(base + i, base + j) for i in range(size) for j in range(i + 1, size)]
    if bridge:
        edges.append((size - 1, size))
    labels = np.repeat([0, 1], size)
    return Graph.build(n, edges, np.eye(2)[labels], labels, 2)


@pytest.fixture
def p3():
    return Graph.build(3, [(0, 1), (1, 2)], np.eye(3), [0, 1, 0], 2)


@pytest.fixture
def cliques():
    return two_cliques()


def dataset_available(name):
    return (DATA / name / "edges.txt").exists()
