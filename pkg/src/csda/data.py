"""Propagation-graph data model and on-disk corpus format.

A corpus is a JSON-lines file, one graph per line:
  {"graph_id": str, "label": "true"|"fake"|null, "root": int,
   "features": [[...d floats...] x N], "edges": [[parent, child], ...],
   "causal_flags": [bool x N] | absent}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

TRUE_NEWS = 0
FAKE_NEWS = 1
_LABEL_TO_STR = {TRUE_NEWS: "true", FAKE_NEWS: "fake"}
_STR_TO_LABEL = {"true": TRUE_NEWS, "fake": FAKE_NEWS}

IN_DISTRIBUTION = "IN_DISTRIBUTION"
OUT_OF_DISTRIBUTION = "OUT_OF_DISTRIBUTION"


class CorpusFormatError(ValueError):
    """A corpus record is malformed; carries the offending line number."""

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


@dataclass
class PropagationGraph:
    """One news item: node features plus the directed reply/repost tree."""
    graph_id: str
    node_features: np.ndarray          # (N, d)
    edges: np.ndarray                  # (E, 2) int, parent -> child
    root_index: int = 0
    label: int | None = None           # TRUE_NEWS | FAKE_NEWS
    causal_node_flags: np.ndarray | None = None  # (N,) bool, synthetic only

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]

    def validate(self) -> None:
        n = self.n_nodes
        if n < 1:
            raise ValueError(f"{self.graph_id}: empty graph")
        if not (0 <= self.root_index < n):
            raise ValueError(f"{self.graph_id}: root index {self.root_index} out of range")
        if self.n_edges:
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise ValueError(f"{self.graph_id}: edge endpoint out of range")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ValueError(f"{self.graph_id}: self-edge")
        _check_dag_rooted(self.edges, n, self.root_index, self.graph_id)
        if self.causal_node_flags is not None and len(self.causal_node_flags) != n:
            raise ValueError(f"{self.graph_id}: causal flag count mismatch")


def _check_dag_rooted(edges: np.ndarray, n: int, root: int, gid: str) -> None:
    children: list[list[int]] = [[] for _ in range(n)]
    indeg = np.zeros(n, dtype=np.int64)
    for p, c in edges:
        children[p].append(int(c))
        indeg[c] += 1
    # Kahn's algorithm for acyclicity
    queue = [i for i in range(n) if indeg[i] == 0]
    seen = 0
    deg = indeg.copy()
    while queue:
        u = queue.pop()
        seen += 1
        for v in children[u]:
            deg[v] -= 1
            if deg[v] == 0:
                queue.append(v)
    if seen != n:
        raise ValueError(f"{gid}: cyclic edges")
    # reachability from the root
    stack = [root]
    reached = np.zeros(n, dtype=bool)
    reached[root] = True
    while stack:
        u = stack.pop()
        for v in children[u]:
            if not reached[v]:
                reached[v] = True
                stack.append(v)
    if not reached.all():
        raise ValueError(f"{gid}: nodes unreachable from root")


@dataclass
class Corpus:
    graphs: list[PropagationGraph]
    distribution_tag: str
    feature_dim: int
    label_reads: int = field(default=0, compare=False)

    def __len__(self):
        return len(self.graphs)

    def read_labels(self) -> np.ndarray:
        """Label vector for all graphs; counted for the access audit."""
        self.label_reads += 1
        labels = [g.label for g in self.graphs]
        if any(lab is None for lab in labels):
            raise ContractError("corpus has unlabelled graphs")
        return np.asarray(labels, dtype=np.int64)

    def validate(self) -> None:
        for g in self.graphs:
            g.validate()
            if g.feature_dim != self.feature_dim:
                raise ValueError(f"{g.graph_id}: feature dim {g.feature_dim} != {self.feature_dim}")
        if self.distribution_tag == IN_DISTRIBUTION:
            if any(g.label is None for g in self.graphs):
                raise ValueError("in-distribution corpus with unlabelled graphs")


def _graph_to_record(g: PropagationGraph) -> dict:
    rec = {
        "graph_id": g.graph_id,
        "label": None if g.label is None else _LABEL_TO_STR[g.label],
        "root": int(g.root_index),
        "features": g.node_features.tolist(),
        "edges": g.edges.tolist(),
    }
    if g.causal_node_flags is not None:
        rec["causal_flags"] = [bool(x) for x in g.causal_node_flags]
    return rec


def _record_to_graph(rec: dict, line: int) -> PropagationGraph:
    try:
        gid = str(rec["graph_id"])
        label_s = rec.get("label")
        features = np.asarray(rec["features"], dtype=np.float64)
        edges = np.asarray(rec.get("edges", []), dtype=np.int64).reshape(-1, 2)
        root = int(rec["root"])
    except (KeyError, TypeError, ValueError) as e:
        raise CorpusFormatError(line, f"malformed record ({e})") from e
    if features.ndim != 2:
        raise CorpusFormatError(line, "features must be a 2D array")
    if label_s is None:
        label = None
    elif label_s in _STR_TO_LABEL:
        label = _STR_TO_LABEL[label_s]
    else:
        raise CorpusFormatError(line, f"unknown label {label_s!r}")
    flags = rec.get("causal_flags")
    if flags is not None:
        flags = np.asarray(flags, dtype=bool)
    g = PropagationGraph(gid, features, edges, root, label, flags)
    try:
        g.validate()
    except ValueError as e:
        raise CorpusFormatError(line, str(e)) from e
    return g


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w") as fh:
        for g in corpus.graphs:
            fh.write(json.dumps(_graph_to_record(g)) + "\n")


def load_corpus(path, distribution_tag: str = IN_DISTRIBUTION) -> Corpus:
    graphs = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(line_no, f"invalid JSON ({e.msg})") from e
            graphs.append(_record_to_graph(rec, line_no))
    if not graphs:
        raise CorpusFormatError(0, "empty corpus file")
    feature_dim = graphs[0].feature_dim
    for i, g in enumerate(graphs, start=1):
        if g.feature_dim != feature_dim:
            raise CorpusFormatError(i, f"inconsistent feature dim {g.feature_dim} != {feature_dim}")
    corpus = Corpus(graphs, distribution_tag, feature_dim)
    corpus.validate()
    return corpus


# ---------------------------------------------------------------------------
# adjacency normalization

@dataclass
class NormalizedAdjacency:
    """D^-1/2 (A_sym + diag(self)) D^-1/2 with a degree floor of 1e-8."""
    matrix: np.ndarray   # (N, N)
    degrees: np.ndarray  # (N,)


DEGREE_FLOOR = 1e-8


def normalize_adjacency(g: PropagationGraph, edge_weights: np.ndarray,
                        node_self_weights: np.ndarray) -> NormalizedAdjacency:
    """Symmetrically normalized weighted adjacency with self loops.

    Each directed edge's weight is placed at both (i, j) and (j, i); the
    self-loop weight of node i fills the diagonal.
    """
    edge_weights = np.asarray(edge_weights, dtype=np.float64)
    node_self_weights = np.asarray(node_self_weights, dtype=np.float64)
    n = g.n_nodes
    if edge_weights.shape != (g.n_edges,):
        raise ContractError(f"expected {g.n_edges} edge weights, got {edge_weights.shape}")
    if node_self_weights.shape != (n,):
        raise ContractError(f"expected {n} self weights, got {node_self_weights.shape}")
    for w, what in ((edge_weights, "edge"), (node_self_weights, "self-loop")):
        if w.size and (w.min() < 0.0 or w.max() > 1.0):
            raise ContractError(f"{what} weight out of [0, 1]")
    a = np.zeros((n, n))
    if g.n_edges:
        np.add.at(a, (g.edges[:, 0], g.edges[:, 1]), edge_weights)
        np.add.at(a, (g.edges[:, 1], g.edges[:, 0]), edge_weights)
    a[np.diag_indices(n)] += node_self_weights
    deg = a.sum(axis=1)
    dinv = 1.0 / np.sqrt(np.maximum(deg, DEGREE_FLOOR))
    return NormalizedAdjacency(dinv[:, None] * a * dinv[None, :], deg)


# ---------------------------------------------------------------------------
# feature providers

def _hash_token(token: str, d: int, salt: int = 0) -> int:
    h = hashlib.md5(f"{salt}:{token}".encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") % d


def identity_features(rows, dim: int | None = None) -> np.ndarray:
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError("identity provider expects an N x d numeric matrix")
    if dim is not None and x.shape[1] != dim:
        raise ConfigError(f"identity provider: got dim {x.shape[1]}, expected {dim}")
    return x


def hashed_bow_features(texts, dim: int) -> np.ndarray:
    """Bag-of-words over hashed token buckets; order-insensitive by construction."""
    out = np.zeros((len(texts), dim))
    for i, text in enumerate(texts):
        for token in str(text).split():
            out[i, _hash_token(token, dim)] += 1.0
    return out


def random_lookup_features(texts, dim: int, seed: int = 0) -> np.ndarray:
    """Mean of per-token embeddings drawn from a token-seeded generator."""
    out = np.zeros((len(texts), dim))
    for i, text in enumerate(texts):
        tokens = str(text).split()
        if not tokens:
            continue
        acc = np.zeros(dim)
        for token in tokens:
            tseed = _hash_token(token, 2 ** 31, salt=seed)
            acc += np.random.default_rng(tseed).standard_normal(dim)
        out[i] = acc / len(tokens)
    return out


FEATURE_PROVIDERS = {
    "identity": identity_features,
    "hashed_bow": hashed_bow_features,
    "random_lookup": random_lookup_features,
}


def feature_provider(name: str):
    try:
        return FEATURE_PROVIDERS[name]
    except KeyError:
        raise ConfigError(f"unknown feature provider {name!r}; "
                          f"choose from {sorted(FEATURE_PROVIDERS)}") from None


# ---------------------------------------------------------------------------
# few-shot split

def split_few_shot(ood: Corpus, fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Stratified split of an OOD corpus into a labelled subset and a test set."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"fraction must be in (0, 1), got {fraction}")
    by_label: dict[int, list[int]] = {}
    for i, g in enumerate(ood.graphs):
        if g.label is None:
            raise ContractError("split_few_shot requires labelled graphs")
        by_label.setdefault(g.label, []).append(i)
    if len(by_label) < 2:
        raise ContractError("split_few_shot requires at least two classes")
    rng = np.random.default_rng(seed)
    labelled_idx: list[int] = []
    for label in sorted(by_label):
        idx = np.array(by_label[label])
        rng.shuffle(idx)
        k = int(round(fraction * len(idx)))
        labelled_idx.extend(idx[:k].tolist())
    if not labelled_idx:
        raise ConfigError(f"fraction {fraction} yields an empty labelled subset")
    labelled_set = set(labelled_idx)
    labelled = [ood.graphs[i] for i in sorted(labelled_set)]
    test = [g for i, g in enumerate(ood.graphs) if i not in labelled_set]
    if not test:
        raise ConfigError(f"fraction {fraction} yields an empty test set")
    return (Corpus(labelled, OUT_OF_DISTRIBUTION, ood.feature_dim),
            Corpus(test, OUT_OF_DISTRIBUTION, ood.feature_dim))
