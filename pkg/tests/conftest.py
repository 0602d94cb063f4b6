"""Shared fixtures and small-graph builders for the test suite."""

import numpy as np
import pytest

from csda.data import Corpus, PropagationGraph, IN_DISTRIBUTION


def random_tree_graph(n: int, d: int, rng: np.random.Generator,
                      label: int | None = None,
                      gid: str = "g") -> PropagationGraph:
    """A random tree (each node i > 0 picks a parent < i) with normal features."""
    if n > 1:
        parents = np.array([int(rng.integers(i)) for i in range(1, n)])
        edges = np.stack([parents, np.arange(1, n)], axis=1)
    else:
        edges = np.empty((0, 2), dtype=np.int64)
    x = rng.standard_normal((n, d))
    return PropagationGraph(gid, x, edges, root_index=0, label=label)


def random_labelled_corpus(n_graphs: int, d: int, seed: int,
                           node_range: tuple[int, int] = (4, 10)) -> Corpus:
    rng = np.random.default_rng(seed)
    graphs = []
    for i in range(n_graphs):
        n = int(rng.integers(node_range[0], node_range[1] + 1))
        graphs.append(random_tree_graph(n, d, rng, label=i % 2, gid=f"g{i}"))
    return Corpus(graphs, IN_DISTRIBUTION, d)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
