"""Synthetic planted-bias propagation-graph benchmark.

Each graph is a random tree. A connected causal motif carries a
label-dependent signal in channels CAUSAL_CHANNELS; a disjoint bias motif
carries a signal that agrees with the label with probability rho (0.95 by
default in-distribution, 0.5 out-of-distribution). Out-of-distribution
graphs additionally shift every node's bias channels by a constant domain
offset, mimicking spurious features whose distribution changes across
domains.
Remaining features are standard-normal noise, so only the motifs are
informative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import (Corpus, PropagationGraph, FAKE_NEWS, TRUE_NEWS,
                   IN_DISTRIBUTION, OUT_OF_DISTRIBUTION)
from .errors import ConfigError

CAUSAL_CHANNELS = slice(0, 4)
BIAS_CHANNELS = slice(4, 8)


@dataclass
class SynthConfig:
    n_train: int = 800
    n_val: int = 200
    n_ood: int = 400
    node_range: tuple[int, int] = (20, 60)
    branching_range: tuple[int, int] = (2, 4)
    feature_dim: int = 32
    causal_size: int = 5
    bias_size: int = 5
    causal_strength: float = 2.0
    bias_strength: float = 3.0
    rho_in: float = 0.95
    rho_out: float = 0.5
    clutter: float = 2.0
    domain_shift: float = 0.0
    label_balance: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_train, self.n_val, self.n_ood) < 2:
            raise ConfigError("every split needs at least 2 graphs")
        if not (1 <= self.node_range[0] <= self.node_range[1]):
            raise ConfigError(f"bad node range {self.node_range}")
        if not (1 <= self.branching_range[0] <= self.branching_range[1]):
            raise ConfigError(f"bad branching range {self.branching_range}")
        if self.feature_dim < 8:
            raise ConfigError("feature_dim must be >= 8 (causal + bias channels)")
        if self.causal_size + self.bias_size >= self.node_range[0]:
            raise ConfigError("motif sizes must fit below the minimum node count")
        for rho in (self.rho_in, self.rho_out):
            if not 0.5 <= rho <= 1.0:
                raise ConfigError(f"rho must be in [0.5, 1.0], got {rho}")
        if not 0.0 < self.label_balance < 1.0:
            raise ConfigError(f"label_balance must be in (0, 1), got {self.label_balance}")
        if self.causal_strength < 0 or self.bias_strength < 0:
            raise ConfigError("signal strengths must be non-negative")
        if self.clutter < 0 or self.domain_shift < 0:
            raise ConfigError("clutter and domain_shift must be non-negative")


def _random_tree(n: int, max_branch: int, rng: np.random.Generator) -> np.ndarray:
    """Parent->child edges of a random tree rooted at 0."""
    child_count = np.zeros(n, dtype=np.int64)
    edges = np.empty((n - 1, 2), dtype=np.int64)
    for i in range(1, n):
        open_nodes = np.flatnonzero(child_count[:i] < max_branch)
        parent = int(rng.choice(open_nodes)) if len(open_nodes) else int(rng.integers(i))
        edges[i - 1] = (parent, i)
        child_count[parent] += 1
    return edges


def _connected_motif(edges: np.ndarray, n: int, size: int, banned: set[int],
                     rng: np.random.Generator) -> list[int]:
    """A connected (undirected) node set of the given size avoiding `banned`."""
    adj: list[list[int]] = [[] for _ in range(n)]
    for p, c in edges:
        adj[p].append(int(c))
        adj[c].append(int(p))
    allowed = [i for i in range(n) if i not in banned]
    start = int(rng.choice(allowed))
    motif = [start]
    chosen = {start}
    frontier = [v for v in adj[start] if v not in banned]
    while len(motif) < size:
        frontier = [v for v in frontier if v not in chosen]
        if not frontier:
            # the component around `start` is exhausted; grow from a new node
            remaining = [i for i in allowed if i not in chosen]
            nxt = int(rng.choice(remaining))
        else:
            nxt = int(rng.choice(frontier))
        motif.append(nxt)
        chosen.add(nxt)
        frontier.extend(v for v in adj[nxt] if v not in banned and v not in chosen)
    return motif


def _make_graph(gid: str, label: int, rho: float, shift: float, cfg: SynthConfig,
                rng: np.random.Generator) -> PropagationGraph:
    n = int(rng.integers(cfg.node_range[0], cfg.node_range[1] + 1))
    max_branch = int(rng.integers(cfg.branching_range[0], cfg.branching_range[1] + 1))
    edges = _random_tree(n, max_branch, rng) if n > 1 else np.empty((0, 2), dtype=np.int64)

    x = rng.standard_normal((n, cfg.feature_dim))
    label_sign = 1.0 if label == FAKE_NEWS else -1.0

    causal_nodes = _connected_motif(edges, n, cfg.causal_size, set(), rng)
    x[causal_nodes, CAUSAL_CHANNELS] += label_sign * cfg.causal_strength

    bias_nodes = _connected_motif(edges, n, cfg.bias_size, set(causal_nodes), rng)
    bias_sign = label_sign if rng.random() < rho else -label_sign
    x[bias_nodes, BIAS_CHANNELS] += bias_sign * cfg.bias_strength
    x[:, BIAS_CHANNELS] += shift

    # per-graph topic clutter: every node outside the causal motif shares a
    # random offset on the causal channels, so unweighted graph-level pooling
    # drowns the causal signal unless the motif is isolated first
    clutter_vec = rng.standard_normal(CAUSAL_CHANNELS.stop - CAUSAL_CHANNELS.start)
    non_causal = np.setdiff1d(np.arange(n), np.asarray(causal_nodes))
    x[non_causal[:, None], CAUSAL_CHANNELS] += cfg.clutter * clutter_vec

    flags = np.zeros(n, dtype=bool)
    flags[causal_nodes] = True
    return PropagationGraph(gid, x, edges, root_index=0, label=label,
                            causal_node_flags=flags)


def _make_split(prefix: str, n_graphs: int, rho: float, shift: float, tag: str,
                cfg: SynthConfig, split_seed: int) -> Corpus:
    rng = np.random.default_rng([cfg.seed, split_seed])
    n_fake = int(round(n_graphs * cfg.label_balance))
    labels = np.array([FAKE_NEWS] * n_fake + [TRUE_NEWS] * (n_graphs - n_fake))
    rng.shuffle(labels)
    graphs = [_make_graph(f"{prefix}-{i:05d}", int(labels[i]), rho, shift, cfg, rng)
              for i in range(n_graphs)]
    corpus = Corpus(graphs, tag, cfg.feature_dim)
    corpus.validate()
    return corpus


def generate_synthetic(cfg: SynthConfig) -> tuple[Corpus, Corpus, Corpus]:
    """Return (in-dist train, in-dist validation, OOD) corpora."""
    cfg.validate()
    train = _make_split("train", cfg.n_train, cfg.rho_in, 0.0, IN_DISTRIBUTION, cfg, 1)
    val = _make_split("val", cfg.n_val, cfg.rho_in, 0.0, IN_DISTRIBUTION, cfg, 2)
    ood = _make_split("ood", cfg.n_ood, cfg.rho_out, cfg.domain_shift,
                      OUT_OF_DISTRIBUTION, cfg, 3)
    return train, val, ood
