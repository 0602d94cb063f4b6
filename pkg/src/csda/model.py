"""CSDA forward pipeline.

A GIN over the symmetrized unweighted graph produces node embeddings; two
score MLPs turn those into per-node alpha and per-edge beta in (0, 1). The
causal view scales features by alpha and weights edges by beta (self loops
by alpha); the biased view uses the complements. Twin two-layer GCNs encode
both views, a mask-weighted mean readout pools node embeddings per graph,
and two MLP+softmax classification modules predict veracity from the
concatenated embeddings. Only the causal module's output is used at
inference time.

Batches of graphs are processed as one block-diagonal graph: features are
stacked, edge indices are offset, and a segment matrix maps nodes back to
their graphs for the readout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PropagationGraph, DEGREE_FLOOR
from .errors import ContractError

HIDDEN = 64
N_CLASSES = 2
# row-normalized mask-head input is rescaled by this factor: large enough
# that mask scores commit within a few epochs, small enough that the
# sigmoids stay trainable afterwards
MASK_HEAD_GAIN = 4.0

TRAIN = "TRAIN"
INFER = "INFER"


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _init_mlp(params: dict, rng: np.random.Generator, name: str, widths: list[int]):
    for layer, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"{name}.w{layer}"] = _kaiming_uniform(rng, w_in, w_out)
        params[f"{name}.b{layer}"] = np.zeros(w_out)


def _mlp(params: dict[str, ad.Parameter], name: str, x: Tensor, n_layers: int) -> Tensor:
    """Linear stack with ReLU between layers (none after the last)."""
    h = x
    for layer in range(n_layers):
        h = ad.add_bias(ad.matmul(h, params[f"{name}.w{layer}"].tensor),
                        params[f"{name}.b{layer}"].tensor)
        if layer < n_layers - 1:
            h = ad.relu(h)
    return h


@dataclass
class GraphBatch:
    """Graphs stacked into one block-diagonal structure."""
    graphs: list[PropagationGraph]
    features: np.ndarray       # (Ntot, d)
    edges: np.ndarray          # (E, 2) global node indices
    sizes: np.ndarray          # (B,)
    offsets: np.ndarray        # (B,) node offset of each graph
    segment: np.ndarray        # (B, Ntot) 0/1 graph membership
    gin_src: np.ndarray        # message-passing index arrays for (A_sym + I)
    gin_dst: np.ndarray
    labels: np.ndarray | None  # (B,) or None

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    @classmethod
    def from_graphs(cls, graphs: list[PropagationGraph],
                    labels: np.ndarray | None = None) -> "GraphBatch":
        if not graphs:
            raise ContractError("empty batch")
        sizes = np.array([g.n_nodes for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        features = np.concatenate([g.node_features for g in graphs], axis=0)
        edge_blocks = [g.edges + off for g, off in zip(graphs, offsets) if g.n_edges]
        edges = (np.concatenate(edge_blocks, axis=0) if edge_blocks
                 else np.empty((0, 2), dtype=np.int64))
        n_tot = int(sizes.sum())
        segment = np.zeros((len(graphs), n_tot))
        for i, (off, sz) in enumerate(zip(offsets, sizes)):
            segment[i, off:off + sz] = 1.0
        loops = np.arange(n_tot)
        gin_src = np.concatenate([edges[:, 0], edges[:, 1], loops])
        gin_dst = np.concatenate([edges[:, 1], edges[:, 0], loops])
        return cls(graphs, features, edges, sizes, offsets, segment,
                   gin_src, gin_dst, labels)


@dataclass
class BatchOutputs:
    batch: GraphBatch
    alpha: Tensor               # (Ntot,)
    beta: Tensor                # (E,)
    z_c: Tensor                 # (B, HIDDEN)
    z_b: Tensor                 # (B, HIDDEN)
    z_causal_live: Tensor       # z_c (+) detach(z_b)
    z_biased_live: Tensor       # detach(z_c) (+) z_b
    predictions: np.ndarray | None = None  # (B, 2), INFER only


def readout(node_embeddings: Tensor, weights: Tensor, segment: np.ndarray) -> Tensor:
    """Per-graph weighted mean: z_g = sum_i w_i h_i / (sum_i w_i + 1e-8)."""
    seg = Tensor(segment)
    numer = ad.matmul(seg, ad.scale_rows(node_embeddings, weights))
    denom = ad.add_scalar(ad.matmul(seg, ad.reshape(weights, (-1, 1))), 1e-8)
    return ad.div_cols(numer, denom)


class CSDAModel:
    """Mask generator + twin subgraph encoders + two classification modules."""

    def __init__(self, feature_dim: int, seed: int = 0, infer_zero_bias: bool = False):
        self.feature_dim = feature_dim
        self.infer_zero_bias = infer_zero_bias
        rng = np.random.default_rng([seed, 17])
        raw: dict[str, np.ndarray] = {}
        _init_mlp(raw, rng, "mask_gen.gin.layer0.mlp", [feature_dim, HIDDEN, HIDDEN])
        _init_mlp(raw, rng, "mask_gen.gin.layer1.mlp", [HIDDEN, HIDDEN, HIDDEN])
        _init_mlp(raw, rng, "mask_gen.node_mlp", [HIDDEN, 32, 1])
        _init_mlp(raw, rng, "mask_gen.edge_mlp", [2 * HIDDEN, 32, 1])
        raw["encoder_c.gcn0.weight"] = _kaiming_uniform(rng, feature_dim, HIDDEN)
        raw["encoder_c.gcn1.weight"] = _kaiming_uniform(rng, HIDDEN, HIDDEN)
        raw["encoder_b.gcn0.weight"] = _kaiming_uniform(rng, feature_dim, HIDDEN)
        raw["encoder_b.gcn1.weight"] = _kaiming_uniform(rng, HIDDEN, HIDDEN)
        _init_mlp(raw, rng, "classifier_c", [2 * HIDDEN, HIDDEN, N_CLASSES])
        _init_mlp(raw, rng, "classifier_b", [2 * HIDDEN, HIDDEN, N_CLASSES])
        self.params = {name: ad.Parameter(name, Tensor(arr)) for name, arr in raw.items()}

    # -- parameter plumbing --------------------------------------------------

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.tensor.data for name, p in self.params.items()}

    def load_parameter_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name}")
            if arrays[name].shape != p.tensor.data.shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {p.tensor.data.shape}")
            p.tensor.data = arrays[name].astype(np.float64).copy()

    def parameters_of(self, prefix: str) -> list[ad.Parameter]:
        return [p for name, p in self.params.items() if name.startswith(prefix)]

    # -- pipeline stages ------------------------------------------------------

    def gin_encode(self, batch: GraphBatch) -> Tensor:
        """Two GIN layers (eps=0, sum aggregation) over the unweighted graph."""
        if batch.features.shape[1] != self.feature_dim:
            raise ad.DimensionError(
                f"feature dim {batch.features.shape[1]} != model dim {self.feature_dim}")
        ones = Tensor(np.ones(len(batch.gin_src)))
        h = Tensor(batch.features)
        for layer in range(2):
            agg = ad.edge_aggregate(ones, batch.gin_src, batch.gin_dst, h)
            h = _mlp(self.params, f"mask_gen.gin.layer{layer}.mlp", agg, 2)
        return h

    def score_masks(self, h: Tensor, edges: np.ndarray,
                    batch: GraphBatch) -> tuple[Tensor, Tensor]:
        """Sigmoid node scores alpha and directed-edge scores beta.

        GIN sum aggregation produces embeddings whose norm grows with
        neighbourhood size; dividing each row by its graph's mean embedding
        norm keeps the score heads in the sigmoid's responsive range without
        erasing the within-graph magnitude contrasts the heads rely on.
        """
        sq = ad.rowsum(ad.mul(h, h))
        norms = ad.power(ad.add_scalar(sq, 1e-12), 0.5)
        mean_norm = ad.matmul(Tensor(batch.segment / batch.sizes[:, None]),
                              ad.reshape(norms, (-1, 1)))
        node_graph = np.repeat(np.arange(len(batch.sizes)), batch.sizes)
        per_node = ad.take(ad.reshape(mean_norm, (-1,)), node_graph)
        h = ad.scale_rows(h, ad.power(ad.add_scalar(per_node, 1e-8), -1.0))
        h = ad.scale(h, MASK_HEAD_GAIN)
        alpha = ad.sigmoid(ad.reshape(_mlp(self.params, "mask_gen.node_mlp", h, 2), (-1,)))
        if len(edges):
            pair = ad.concat([ad.take_rows(h, edges[:, 0]),
                              ad.take_rows(h, edges[:, 1])], axis=1)
            beta = ad.sigmoid(ad.reshape(_mlp(self.params, "mask_gen.edge_mlp", pair, 2), (-1,)))
        else:
            beta = Tensor(np.zeros(0))
        return alpha, beta

    def _normalized_edge_values(self, batch: GraphBatch, edge_w: Tensor,
                                self_w: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Entries of D^-1/2 (A_sym + diag(self_w)) D^-1/2 in edge-list form."""
        n = batch.n_nodes
        e = batch.edges
        src = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
        dst = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
        w_all = ad.concat([ad.reshape(edge_w, (-1, 1)), ad.reshape(edge_w, (-1, 1)),
                           ad.reshape(self_w, (-1, 1))], axis=0)
        w_all = ad.reshape(w_all, (-1,))
        deg = ad.scatter_sum(w_all, dst, n)
        dinv = ad.power(ad.clamp(deg, DEGREE_FLOOR, np.inf), -0.5)
        vals = ad.mul(w_all, ad.mul(ad.take(dinv, src), ad.take(dinv, dst)))
        return vals, src, dst

    def gcn_encode(self, batch: GraphBatch, x: Tensor, edge_w: Tensor,
                   self_w: Tensor, encoder: str) -> Tensor:
        """Two GCN layers over the masked, symmetrically normalized graph."""
        vals, src, dst = self._normalized_edge_values(batch, edge_w, self_w)
        z = x
        for layer in range(2):
            zw = ad.matmul(z, self.params[f"{encoder}.gcn{layer}.weight"].tensor)
            z = ad.relu(ad.edge_aggregate(vals, src, dst, zw))
        return z

    def classify(self, z: Tensor, module: str) -> Tensor:
        """Probability rows from one classification module ('c' or 'b')."""
        return ad.softmax_rows(_mlp(self.params, f"classifier_{module}", z, 2))

    # -- full forward ----------------------------------------------------------

    def forward_batch(self, batch: GraphBatch, mode: str = TRAIN) -> BatchOutputs:
        if mode not in (TRAIN, INFER):
            raise ContractError(f"unknown mode {mode!r}")
        if mode == TRAIN and batch.labels is None:
            raise ContractError("TRAIN mode requires labels")
        h = self.gin_encode(batch)
        alpha, beta = self.score_masks(h, batch.edges, batch)
        one_minus_alpha = ad.add_scalar(ad.neg(alpha), 1.0)
        one_minus_beta = ad.add_scalar(ad.neg(beta), 1.0)

        x = Tensor(batch.features)
        x_c = ad.scale_rows(x, alpha)
        # x - x_c rather than (1 - alpha) * x: same value and gradient, but
        # the two masked feature matrices now sum to the input bit-exactly
        x_b = ad.sub(x, x_c)
        h_c = self.gcn_encode(batch, x_c, beta, alpha, "encoder_c")
        h_b = self.gcn_encode(batch, x_b, one_minus_beta, one_minus_alpha, "encoder_b")
        z_c = readout(h_c, alpha, batch.segment)
        z_b = readout(h_b, one_minus_alpha, batch.segment)

        z_causal_live = ad.concat([z_c, ad.detach(z_b)], axis=1)
        z_biased_live = ad.concat([ad.detach(z_c), z_b], axis=1)
        out = BatchOutputs(batch, alpha, beta, z_c, z_b, z_causal_live, z_biased_live)
        if mode == INFER:
            if self.infer_zero_bias:
                z_full = ad.concat([z_c, Tensor(np.zeros_like(z_b.data))], axis=1)
            else:
                z_full = ad.concat([z_c, z_b], axis=1)
            out.predictions = self.classify(z_full, "c").data
        return out

    def predict(self, graphs: list[PropagationGraph]) -> np.ndarray:
        """Class probability rows via the causal classification module."""
        return self.forward_batch(GraphBatch.from_graphs(graphs), INFER).predictions

    def mask_scores(self, g: PropagationGraph) -> tuple[np.ndarray, np.ndarray]:
        """Per-node alpha and per-edge beta for one graph."""
        batch = GraphBatch.from_graphs([g])
        h = self.gin_encode(batch)
        alpha, beta = self.score_masks(h, batch.edges, batch)
        return alpha.data.copy(), beta.data.copy()


class PlainGCNModel:
    """No-Causal ablation baseline: one GCN on the raw graph + CE classifier."""

    def __init__(self, feature_dim: int, seed: int = 0):
        self.feature_dim = feature_dim
        rng = np.random.default_rng([seed, 29])
        raw: dict[str, np.ndarray] = {}
        raw["encoder.gcn0.weight"] = _kaiming_uniform(rng, feature_dim, HIDDEN)
        raw["encoder.gcn1.weight"] = _kaiming_uniform(rng, HIDDEN, HIDDEN)
        _init_mlp(raw, rng, "classifier", [HIDDEN, HIDDEN, N_CLASSES])
        self.params = {name: ad.Parameter(name, Tensor(arr)) for name, arr in raw.items()}

    parameter_arrays = CSDAModel.parameter_arrays
    load_parameter_arrays = CSDAModel.load_parameter_arrays
    parameters_of = CSDAModel.parameters_of

    def _embed(self, batch: GraphBatch) -> Tensor:
        n, e = batch.n_nodes, batch.edges
        edge_w = Tensor(np.ones(len(e)))
        self_w = Tensor(np.ones(n))
        src = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
        dst = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
        deg = np.bincount(dst, minlength=n).astype(float)
        dinv = 1.0 / np.sqrt(np.maximum(deg, DEGREE_FLOOR))
        vals = Tensor(dinv[src] * dinv[dst])
        z = Tensor(batch.features)
        for layer in range(2):
            zw = ad.matmul(z, self.params[f"encoder.gcn{layer}.weight"].tensor)
            z = ad.relu(ad.edge_aggregate(vals, src, dst, zw))
        uniform = Tensor(np.ones(n))
        return readout(z, uniform, batch.segment)

    def probs(self, batch: GraphBatch) -> Tensor:
        return ad.softmax_rows(_mlp(self.params, "classifier", self._embed(batch), 2))

    def predict(self, graphs: list[PropagationGraph]) -> np.ndarray:
        return self.probs(GraphBatch.from_graphs(graphs)).data
