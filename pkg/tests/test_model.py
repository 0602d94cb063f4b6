"""Model pipeline: GIN encoder, mask scoring, masked GCN encoding, readout,
classifiers, and the full forward pass with its detachment contract."""

import numpy as np
import pytest

from csda import autodiff as ad
from csda.autodiff import Tape, Tensor, backward
from csda.data import PropagationGraph
from csda.errors import ContractError
from csda.model import (CSDAModel, GraphBatch, INFER, PlainGCNModel, TRAIN,
                        readout)

from conftest import random_tree_graph


D = 8


def one_node_graph(rng, label=0):
    return PropagationGraph("n1", rng.standard_normal((1, D)),
                            np.empty((0, 2), dtype=np.int64), 0, label)


def permute_graph(g, perm):
    """Re-index nodes by perm (old index i becomes perm[i])."""
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return PropagationGraph(g.graph_id + "-perm",
                            g.node_features[inv],
                            np.array([[perm[p], perm[c]] for p, c in g.edges]),
                            int(perm[g.root_index]), g.label)


def relu(x):
    return np.maximum(x, 0.0)


def np_mlp(model, name, x):
    a = model.parameter_arrays()
    h = relu(x @ a[f"{name}.w0"] + a[f"{name}.b0"])
    return h @ a[f"{name}.w1"] + a[f"{name}.b1"]


# ---------------------------------------------------------------------------
# GIN encoder

def test_gin_one_node_closed_form(rng):
    g = one_node_graph(rng)
    model = CSDAModel(D, seed=0)
    h = model.gin_encode(GraphBatch.from_graphs([g])).data
    # single node with only its self-loop message: H = MLP1(MLP0(x))
    expect = np_mlp(model, "mask_gen.gin.layer1.mlp",
                    np_mlp(model, "mask_gen.gin.layer0.mlp", g.node_features))
    np.testing.assert_allclose(h, expect, atol=1e-12)


def test_gin_permutation_equivariant(rng):
    model = CSDAModel(D, seed=1)
    for trial in range(5):
        g = random_tree_graph(9, D, rng, gid=f"t{trial}")
        perm = rng.permutation(g.n_nodes)
        h = model.gin_encode(GraphBatch.from_graphs([g])).data
        hp = model.gin_encode(GraphBatch.from_graphs([permute_graph(g, perm)])).data
        assert np.abs(hp[perm] - h).max() < 1e-9


def test_gin_isomorphic_trees_equal_row_multisets(rng):
    model = CSDAModel(D, seed=2)
    x = rng.standard_normal((4, D))
    # the same star shape written with two different node orderings
    g1 = PropagationGraph("s1", x, np.array([[0, 1], [0, 2], [0, 3]]))
    g2 = PropagationGraph("s2", x[[1, 0, 2, 3]],
                          np.array([[1, 0], [1, 2], [1, 3]]), root_index=1)
    h1 = model.gin_encode(GraphBatch.from_graphs([g1])).data
    h2 = model.gin_encode(GraphBatch.from_graphs([g2])).data
    order = lambda h: h[np.lexsort(h.T)]
    np.testing.assert_allclose(order(h1), order(h2), atol=1e-9)


def test_gin_rejects_wrong_feature_dim(rng):
    model = CSDAModel(D, seed=0)
    g = random_tree_graph(4, D + 1, rng)
    with pytest.raises(ad.DimensionError):
        model.gin_encode(GraphBatch.from_graphs([g]))


# ---------------------------------------------------------------------------
# mask scores

def test_zeroed_score_heads_give_half(rng):
    model = CSDAModel(D, seed=3)
    for name in ("mask_gen.node_mlp.w1", "mask_gen.node_mlp.b1",
                 "mask_gen.edge_mlp.w1", "mask_gen.edge_mlp.b1"):
        model.params[name].tensor.data[...] = 0.0
    g = random_tree_graph(6, D, rng)
    alpha, beta = model.mask_scores(g)
    np.testing.assert_array_equal(alpha, np.full(6, 0.5))
    np.testing.assert_array_equal(beta, np.full(5, 0.5))


def test_scores_in_open_unit_interval(rng):
    model = CSDAModel(D, seed=4)
    g = random_tree_graph(12, D, rng)
    alpha, beta = model.mask_scores(g)
    assert np.all((alpha > 0) & (alpha < 1))
    assert np.all((beta > 0) & (beta < 1))


def test_edge_score_depends_on_endpoint_order(rng):
    # same path graph, same node embeddings; only the first edge's direction
    # differs, so its score reads the concatenated pair in the other order
    model = CSDAModel(D, seed=5)
    x = rng.standard_normal((3, D))
    fwd = PropagationGraph("f", x, np.array([[0, 1], [1, 2]]))
    rev = PropagationGraph("r", x, np.array([[1, 0], [1, 2]]), root_index=1)
    _, beta_fwd = model.mask_scores(fwd)
    _, beta_rev = model.mask_scores(rev)
    assert beta_fwd[0] != beta_rev[0]
    assert beta_fwd[1] == beta_rev[1]


def test_mask_scores_pure(rng):
    model = CSDAModel(D, seed=6)
    g = random_tree_graph(7, D, rng)
    a1, b1 = model.mask_scores(g)
    a2, b2 = model.mask_scores(g)
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(b1, b2)


# ---------------------------------------------------------------------------
# masking and complementarity

def test_mask_complement_reconstructs_features(rng):
    # the biased view is the exact remainder x - x_c, so reconstruction
    # x_c + x_b can miss the input by at most one float64 ulp per element
    model = CSDAModel(D, seed=7)
    g = random_tree_graph(10, D, rng, label=1)
    batch = GraphBatch.from_graphs([g], np.array([1]))
    alpha, _ = model.score_masks(model.gin_encode(batch), batch.edges, batch)
    x = Tensor(batch.features)
    x_c = ad.scale_rows(x, alpha)
    x_b = ad.sub(x, x_c)
    assert np.array_equal(x_b.data, batch.features - x_c.data)
    err = np.abs((x_c.data + x_b.data) - batch.features)
    assert np.all(err <= np.spacing(np.abs(batch.features)))
    # alpha = 1 zeroes the biased view; alpha = 0.5 splits the features evenly
    ones = Tensor(np.ones(g.n_nodes))
    np.testing.assert_array_equal(ad.sub(x, ad.scale_rows(x, ones)).data,
                                  np.zeros_like(batch.features))
    halves = Tensor(np.full(g.n_nodes, 0.5))
    np.testing.assert_allclose(ad.scale_rows(x, halves).data,
                               ad.sub(x, ad.scale_rows(x, halves)).data)


# ---------------------------------------------------------------------------
# GCN encoder

def test_gcn_one_node_closed_form(rng):
    model = CSDAModel(D, seed=8)
    g = one_node_graph(rng)
    batch = GraphBatch.from_graphs([g])
    z = model.gcn_encode(batch, Tensor(batch.features), Tensor(np.zeros(0)),
                         Tensor(np.ones(1)), "encoder_c").data
    a = model.parameter_arrays()
    expect = relu(relu(g.node_features @ a["encoder_c.gcn0.weight"])
                  @ a["encoder_c.gcn1.weight"])
    np.testing.assert_allclose(z, expect, atol=1e-12)


def test_gcn_matches_dense_brute_force(rng):
    from csda.data import normalize_adjacency
    model = CSDAModel(D, seed=9)
    a = model.parameter_arrays()
    for trial in range(10):
        n = int(rng.integers(2, 9))
        g = random_tree_graph(n, D, rng, gid=f"b{trial}")
        ew = rng.random(g.n_edges)
        sw = rng.random(n)
        batch = GraphBatch.from_graphs([g])
        z = model.gcn_encode(batch, Tensor(batch.features), Tensor(ew),
                             Tensor(sw), "encoder_b").data
        ahat = normalize_adjacency(g, ew, sw).matrix
        expect = relu(ahat @ relu(ahat @ g.node_features
                                  @ a["encoder_b.gcn0.weight"])
                      @ a["encoder_b.gcn1.weight"])
        assert np.abs(z - expect).max() < 1e-10


def test_gcn_zero_features_zero_output(rng):
    model = CSDAModel(D, seed=10)
    g = random_tree_graph(5, D, rng)
    batch = GraphBatch.from_graphs([g])
    z = model.gcn_encode(batch, Tensor(np.zeros((5, D))),
                         Tensor(np.ones(4)), Tensor(np.ones(5)), "encoder_c")
    np.testing.assert_array_equal(z.data, np.zeros((5, 64)))


# ---------------------------------------------------------------------------
# readout

def test_readout_equal_weights_is_mean(rng):
    h = rng.standard_normal((6, 5))
    seg = np.ones((1, 6))
    z = readout(Tensor(h), Tensor(np.full(6, 0.7)), seg).data
    np.testing.assert_allclose(z[0], h.mean(axis=0), atol=1e-8)


def test_readout_single_node(rng):
    h = rng.standard_normal((1, 5))
    z = readout(Tensor(h), Tensor(np.ones(1)), np.ones((1, 1))).data
    np.testing.assert_allclose(z[0], h[0], atol=1e-7)


def test_readout_one_hot_weight_selects_row(rng):
    h = rng.standard_normal((5, 4))
    w = np.zeros(5)
    w[3] = 1.0
    z = readout(Tensor(h), Tensor(w), np.ones((1, 5))).data
    np.testing.assert_allclose(z[0], h[3], atol=1e-6)


def test_readout_respects_graph_segments(rng):
    h = rng.standard_normal((5, 4))
    seg = np.array([[1, 1, 0, 0, 0], [0, 0, 1, 1, 1]], dtype=float)
    z = readout(Tensor(h), Tensor(np.ones(5)), seg).data
    np.testing.assert_allclose(z[0], h[:2].mean(axis=0), atol=1e-8)
    np.testing.assert_allclose(z[1], h[2:].mean(axis=0), atol=1e-8)


# ---------------------------------------------------------------------------
# classifiers

def test_zeroed_classifier_head_gives_uniform(rng):
    model = CSDAModel(D, seed=11)
    model.params["classifier_c.w1"].tensor.data[...] = 0.0
    model.params["classifier_c.b1"].tensor.data[...] = 0.0
    z = Tensor(rng.standard_normal((4, 128)))
    np.testing.assert_allclose(model.classify(z, "c").data, np.full((4, 2), 0.5))


def test_classifier_rows_are_probabilities(rng):
    model = CSDAModel(D, seed=12)
    probs = model.classify(Tensor(rng.standard_normal((8, 128)) * 5), "b").data
    np.testing.assert_allclose(probs.sum(axis=1), np.ones(8), atol=1e-9)
    assert np.all((probs > 0) & (probs < 1))


def test_softmax_shift_invariance(rng):
    logits = rng.standard_normal((3, 2))
    a = ad.softmax_rows(Tensor(logits)).data
    b = ad.softmax_rows(Tensor(logits + 7.5)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_probability_monotone_in_logit(rng):
    for _ in range(5):
        logits = rng.standard_normal((1, 2))
        lo = ad.softmax_rows(Tensor(logits)).data[0, 0]
        logits[0, 0] += 0.5
        hi = ad.softmax_rows(Tensor(logits)).data[0, 0]
        assert hi > lo


# ---------------------------------------------------------------------------
# full forward

def test_forward_infer_single_graph(rng):
    model = CSDAModel(D, seed=13)
    g = random_tree_graph(6, D, rng)
    out = model.forward_batch(GraphBatch.from_graphs([g]), INFER)
    assert out.predictions.shape == (1, 2)
    assert out.predictions.sum() == pytest.approx(1.0, abs=1e-9)


def test_forward_train_requires_labels(rng):
    model = CSDAModel(D, seed=13)
    g = random_tree_graph(6, D, rng)
    with pytest.raises(ContractError, match="labels"):
        model.forward_batch(GraphBatch.from_graphs([g]), TRAIN)


def test_forward_deterministic(rng):
    model = CSDAModel(D, seed=14)
    graphs = [random_tree_graph(6, D, rng, gid=f"d{i}") for i in range(3)]
    a = model.predict(graphs)
    b = model.predict(graphs)
    assert np.array_equal(a, b)


def test_embeddings_invariant_to_node_permutation(rng):
    model = CSDAModel(D, seed=15)
    for trial in range(5):
        g = random_tree_graph(10, D, rng, label=1, gid=f"p{trial}")
        perm = rng.permutation(g.n_nodes)
        out = model.forward_batch(GraphBatch.from_graphs([g]), INFER)
        out_p = model.forward_batch(
            GraphBatch.from_graphs([permute_graph(g, perm)]), INFER)
        assert np.abs(out.z_c.data - out_p.z_c.data).max() < 1e-9
        assert np.abs(out.z_b.data - out_p.z_b.data).max() < 1e-9


def test_biased_loss_never_reaches_causal_encoder(rng):
    from csda.losses import LossHyperparams, cross_entropy_loss
    model = CSDAModel(D, seed=16)
    graphs = [random_tree_graph(6, D, rng, label=i % 2, gid=f"l{i}")
              for i in range(4)]
    batch = GraphBatch.from_graphs(graphs, np.array([0, 1, 0, 1]))
    with Tape():
        out = model.forward_batch(batch, TRAIN)
        loss_b = cross_entropy_loss(model.classify(out.z_biased_live, "b"),
                                    batch.labels)
        grads_b = backward(loss_b)
        loss_c = cross_entropy_loss(model.classify(out.z_causal_live, "c"),
                                    batch.labels)
        grads_c = backward(loss_c)
    for p in model.parameters_of("encoder_c"):
        g = grads_b.get(p.tensor.node_id)
        assert g is None or not np.any(g)
    for p in model.parameters_of("encoder_b"):
        g = grads_c.get(p.tensor.node_id)
        assert g is None or not np.any(g)


def test_infer_zero_bias_flag_changes_input_to_classifier(rng):
    g = random_tree_graph(6, D, rng)
    normal = CSDAModel(D, seed=17).predict([g])
    zeroed = CSDAModel(D, seed=17, infer_zero_bias=True).predict([g])
    assert not np.array_equal(normal, zeroed)


def test_checkpoint_round_trip_preserves_predictions(rng, tmp_path):
    from csda.autodiff import load_checkpoint, save_checkpoint
    model = CSDAModel(D, seed=18)
    g = random_tree_graph(6, D, rng)
    before = model.predict([g])
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model.parameter_arrays())
    other = CSDAModel(D, seed=99)
    other.load_parameter_arrays(load_checkpoint(path))
    assert np.array_equal(other.predict([g]), before)


def test_plain_gcn_outputs_probabilities(rng):
    model = PlainGCNModel(D, seed=19)
    graphs = [random_tree_graph(5, D, rng, gid=f"pg{i}") for i in range(3)]
    probs = model.predict(graphs)
    assert probs.shape == (3, 2)
    np.testing.assert_allclose(probs.sum(axis=1), np.ones(3), atol=1e-9)


def test_causal_and_biased_encoders_are_separate_storage():
    model = CSDAModel(D, seed=20)
    model.params["encoder_c.gcn0.weight"].tensor.data[...] = 0.0
    assert np.any(model.params["encoder_b.gcn0.weight"].tensor.data)
