"""Loss functions: GCE, reweighted CE, swap augmentation, bundle identities,
contrastive terms, and the combined fine-tuning objective."""

import numpy as np
import pytest

from csda import autodiff as ad
from csda.autodiff import Tape, Tensor, backward, grad_check
from csda.errors import ConfigError, ContractError
from csda.losses import (LossHyperparams, assemble_losses, cosine_sim,
                         cross_entropy_loss, enhanced_total, gce_loss,
                         reweight_factors, reweighted_ce_loss, supcon_in,
                         supcon_out, swap_augment)


def probs_from_logits(logits):
    return ad.softmax_rows(logits)


def random_probs(rng, n):
    p = rng.random((n, 2)) + 0.05
    return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# GCE

def test_gce_perfect_prediction_is_zero():
    probs = Tensor([[1.0, 0.0], [0.0, 1.0]])
    assert gce_loss(probs, np.array([0, 1]), 0.7).item() == pytest.approx(0.0, abs=1e-8)


def test_gce_half_probability_value():
    # (1 - 0.5^0.7) / 0.7, evaluated to high precision
    probs = Tensor([[0.5, 0.5]])
    expect = (1.0 - 0.5 ** 0.7) / 0.7
    assert expect == pytest.approx(0.5491826, abs=1e-6)
    assert gce_loss(probs, np.array([0]), 0.7).item() == pytest.approx(expect, abs=1e-12)


def test_gce_small_q_recovers_cross_entropy():
    probs = Tensor([[0.5, 0.5]])
    labels = np.array([0])
    gce = gce_loss(probs, labels, 1e-3).item()
    assert gce == pytest.approx(np.log(2.0), abs=5e-4)


def test_gce_ce_limit_over_many_random_pairs():
    # GCE - CE = -q ln^2(p)/2 + O(q^2); at q = 1e-3 the 5e-4 budget covers
    # moderate-confidence probabilities (the regime the classifier produces),
    # so the pairs are softmaxed random logits rather than arbitrary simplex
    # points whose -ln p is unbounded
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = ad.softmax_rows(Tensor(rng.standard_normal((1000, 2)) * 0.5)).data
        labels = rng.integers(0, 2, size=1000)
        gce = gce_loss(Tensor(p), labels, 1e-3).item()
        ce = cross_entropy_loss(Tensor(p), labels).item()
        worst = max(worst, abs(gce - ce))
    assert worst < 5e-4


def test_gce_rejects_bad_q():
    probs = Tensor([[0.5, 0.5]])
    for q in (0.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            gce_loss(probs, np.array([0]), q)


def test_gce_gradient_scales_by_confidence():
    # d GCE / d p_y = -p_y^(q-1) = p_y^q * (d CE / d p_y); the biased branch's
    # gradient is amplified on confidently fit samples relative to CE
    q = 0.7
    for p_y in (0.2, 0.5, 0.9):
        probs = Tensor(np.array([[p_y, 1.0 - p_y]]))
        probs.requires_grad = True
        with Tape():
            g_gce = backward(gce_loss(probs, np.array([0]), q))[probs.node_id]
        with Tape():
            g_ce = backward(cross_entropy_loss(probs, np.array([0])))[probs.node_id]
        ratio = g_gce[0, 0] / g_ce[0, 0]
        assert ratio == pytest.approx(p_y ** q, rel=1e-9)


def test_gce_finite_on_extreme_probabilities():
    probs = Tensor([[1.0, 0.0], [1e-300, 1.0]])
    val = gce_loss(probs, np.array([1, 0]), 0.7).item()
    assert np.isfinite(val)


# ---------------------------------------------------------------------------
# reweighted CE

def test_reweight_factor_symmetric_case():
    ce = np.array([0.4, 1.7])
    w = reweight_factors(ce, ce.copy())
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-10)


def test_reweight_factor_bias_conflicting_sample():
    w = reweight_factors(np.array([0.0]), np.array([2.0]))
    assert w[0] == pytest.approx(1.0, abs=1e-10)


def test_reweighted_ce_gradient_holds_w_constant():
    rng = np.random.default_rng(1)
    logits_c = Tensor(rng.standard_normal((4, 2)))
    logits_b = Tensor(rng.standard_normal((4, 2)))
    labels = np.array([0, 1, 0, 1])

    def f(lc, lb):
        return reweighted_ce_loss(probs_from_logits(lc), probs_from_logits(lb), labels)

    report = grad_check(f, [logits_c, logits_b], rel_tol=1e-4)
    assert report.passed, report.failures


def test_reweighted_ce_matches_manual_formula():
    rng = np.random.default_rng(2)
    pc, pb = random_probs(rng, 5), random_probs(rng, 5)
    labels = rng.integers(0, 2, size=5)
    ce_c = -np.log(pc[np.arange(5), labels])
    ce_b = -np.log(pb[np.arange(5), labels])
    w = ce_b / (ce_b + ce_c + 1e-12)
    expect = float((w * ce_c).mean())
    got = reweighted_ce_loss(Tensor(pc), Tensor(pb), labels).item()
    assert got == pytest.approx(expect, abs=1e-12)


# ---------------------------------------------------------------------------
# swap augmentation

class _IdentityPermRng:
    def permutation(self, n):
        return np.arange(n)


def test_swap_identity_permutation():
    rng = np.random.default_rng(3)
    z_c = Tensor(rng.standard_normal((4, 8)))
    z_b = Tensor(rng.standard_normal((4, 8)))
    labels = np.array([0, 1, 1, 0])
    views = swap_augment(z_c, z_b, labels, _IdentityPermRng())
    np.testing.assert_array_equal(views.labels_permuted, labels)
    np.testing.assert_array_equal(views.causal_live.data,
                                  np.concatenate([z_c.data, z_b.data], axis=1))


def test_swap_preserves_row_multiset():
    rng = np.random.default_rng(4)
    z_c = Tensor(rng.standard_normal((6, 8)))
    z_b = Tensor(rng.standard_normal((6, 8)))
    labels = np.arange(6) % 2
    views = swap_augment(z_c, z_b, labels, np.random.default_rng(9))
    swapped = views.biased_live.data[:, 8:]
    order = lambda m: m[np.lexsort(m.T)]
    np.testing.assert_array_equal(order(swapped), order(z_b.data))


def test_swap_permutation_replay():
    rng = np.random.default_rng(5)
    z_c = Tensor(rng.standard_normal((5, 8)))
    z_b = Tensor(rng.standard_normal((5, 8)))
    labels = np.array([0, 0, 1, 1, 0])
    views = swap_augment(z_c, z_b, labels, np.random.default_rng(10))
    pi = views.permutation
    np.testing.assert_array_equal(views.causal_live.data[:, 8:], z_b.data[pi])
    np.testing.assert_array_equal(views.labels_permuted, labels[pi])


def test_swap_rejects_singleton_batch():
    z = Tensor(np.zeros((1, 8)))
    with pytest.raises(ContractError):
        swap_augment(z, z, np.array([0]), np.random.default_rng(0))


def test_swap_detachment_mirrors_forward():
    rng = np.random.default_rng(6)
    z_c = Tensor(rng.standard_normal((3, 4)))
    z_b = Tensor(rng.standard_normal((3, 4)))
    z_c.requires_grad = True
    z_b.requires_grad = True
    with Tape():
        views = swap_augment(z_c, z_b, np.array([0, 1, 0]), np.random.default_rng(1))
        grads = backward(ad.sum_all(views.causal_live))
    assert z_c.node_id in grads
    assert z_b.node_id not in grads
    with Tape():
        views = swap_augment(z_c, z_b, np.array([0, 1, 0]), np.random.default_rng(1))
        grads = backward(ad.sum_all(views.biased_live))
    assert z_b.node_id in grads
    assert z_c.node_id not in grads


# ---------------------------------------------------------------------------
# bundle

def _random_bundle(seed, n=5):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    perm = np.random.default_rng(seed + 1).permutation(n)
    pc, pb = random_probs(rng, n), random_probs(rng, n)
    pca, pba = random_probs(rng, n), random_probs(rng, n)
    return assemble_losses(Tensor(pc), Tensor(pb), Tensor(pca), Tensor(pba),
                           labels, labels[perm], LossHyperparams())


def test_bundle_identities_hold():
    for seed in range(5):
        b = _random_bundle(seed)
        assert b.dis.item() == pytest.approx(b.biased.item() + b.causal.item(), abs=1e-12)
        assert b.swap.item() == pytest.approx(b.causal_aug.item() + b.biased_aug.item(), abs=1e-12)
        assert b.total.item() == pytest.approx(b.dis.item() + b.swap.item(), abs=1e-12)


def test_bundle_identity_permutation_matches_plain_terms():
    rng = np.random.default_rng(7)
    n = 4
    labels = rng.integers(0, 2, size=n)
    pc, pb = random_probs(rng, n), random_probs(rng, n)
    b = assemble_losses(Tensor(pc), Tensor(pb), Tensor(pc), Tensor(pb),
                        labels, labels, LossHyperparams())
    assert b.causal_aug.item() == pytest.approx(b.causal.item(), abs=1e-12)
    assert b.biased_aug.item() == pytest.approx(b.biased.item(), abs=1e-12)


def test_bundle_objective_selects_components():
    b = _random_bundle(11)
    picked = b.objective({"biased", "causal"}).item()
    assert picked == pytest.approx(b.biased.item() + b.causal.item(), abs=1e-12)
    assert b.objective(None).item() == b.total.item()
    with pytest.raises(ConfigError):
        b.objective({"nonsense"})


def test_bundle_gradient_matches_finite_differences():
    labels = np.array([0, 1, 0])
    perm = np.array([2, 0, 1])
    rng = np.random.default_rng(8)
    lc, lb = Tensor(rng.standard_normal((3, 2))), Tensor(rng.standard_normal((3, 2)))
    lca, lba = Tensor(rng.standard_normal((3, 2))), Tensor(rng.standard_normal((3, 2)))

    def f(lc, lb, lca, lba):
        b = assemble_losses(probs_from_logits(lc), probs_from_logits(lb),
                            probs_from_logits(lca), probs_from_logits(lba),
                            labels, labels[perm], LossHyperparams())
        return b.total

    report = grad_check(f, [lc, lb, lca, lba], rel_tol=1e-4)
    assert report.passed, report.failures


# ---------------------------------------------------------------------------
# cosine similarity

def test_cosine_sim_basic_identities(rng):
    v = Tensor(rng.standard_normal(6))
    assert cosine_sim(v, v).item() == pytest.approx(1.0, abs=1e-12)
    assert cosine_sim(v, ad.neg(v)).item() == pytest.approx(-1.0, abs=1e-12)
    e1 = Tensor(np.array([1.0, 0.0, 0.0]))
    e2 = Tensor(np.array([0.0, 1.0, 0.0]))
    assert cosine_sim(e1, e2).item() == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# contrastive losses

def test_supcon_in_two_identical_same_class():
    reps = Tensor(np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]))
    loss = supcon_in(reps, np.array([1, 1]), tau=0.1)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_supcon_in_no_positive_pairs_is_zero(rng):
    reps = Tensor(rng.standard_normal((2, 4)))
    assert supcon_in(reps, np.array([0, 1]), tau=0.1).item() == 0.0


def test_supcon_in_scale_invariant(rng):
    reps = rng.standard_normal((6, 4))
    labels = np.array([0, 0, 1, 1, 0, 1])
    a = supcon_in(Tensor(reps), labels, tau=0.1).item()
    b = supcon_in(Tensor(reps * 37.5), labels, tau=0.1).item()
    assert a == pytest.approx(b, rel=1e-9)


def test_supcon_in_permutation_invariant(rng):
    reps = rng.standard_normal((6, 4))
    labels = np.array([0, 0, 1, 1, 0, 1])
    perm = rng.permutation(6)
    a = supcon_in(Tensor(reps), labels, tau=0.1).item()
    b = supcon_in(Tensor(reps[perm]), labels[perm], tau=0.1).item()
    assert a == pytest.approx(b, rel=1e-9)


def test_supcon_in_rejects_single_sample():
    with pytest.raises(ContractError):
        supcon_in(Tensor(np.zeros((1, 4))), np.array([0]), tau=0.1)


def test_supcon_in_manual_three_sample_case():
    # anchor 0 with one positive (1) and one negative (2); unit vectors so
    # every similarity is explicit
    reps = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    labels = np.array([0, 0, 1])
    tau = 0.5
    sims = reps @ reps.T / tau
    expect = 0.0
    for anchor in range(3):
        pos = [m for m in range(3) if m != anchor and labels[m] == labels[anchor]]
        if not pos:
            continue
        denom = sum(np.exp(sims[anchor, k]) for k in range(3) if k != anchor)
        expect += -np.mean([sims[anchor, m] - np.log(denom) for m in pos])
    expect /= 3
    got = supcon_in(Tensor(reps), labels, tau).item()
    assert got == pytest.approx(expect, abs=1e-10)


def test_supcon_out_identical_matching_pair_is_zero():
    rep = np.array([[0.5, -1.0, 2.0]])
    loss = supcon_out(Tensor(rep), np.array([1]), Tensor(rep), np.array([1]), 0.1)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_supcon_out_anchor_without_positives_contributes_zero(rng):
    reps_out = Tensor(rng.standard_normal((1, 4)))
    reps_in = Tensor(rng.standard_normal((3, 4)))
    loss = supcon_out(reps_out, np.array([0]), reps_in, np.array([1, 1, 1]), 0.1)
    assert loss.item() == 0.0


def test_supcon_out_large_tau_limit(rng):
    # tau -> inf flattens every pairwise ratio; each per-positive log-ratio
    # tends to -log(N_in), so every anchor with positives contributes
    # log(N_in) regardless of how many positives it has
    reps_out = Tensor(rng.standard_normal((2, 4)))
    reps_in = Tensor(rng.standard_normal((4, 4)))
    labels_in = np.array([0, 0, 0, 1])
    labels_out = np.array([0, 1])
    loss = supcon_out(reps_out, labels_out, reps_in, labels_in, tau=1e6).item()
    assert loss == pytest.approx(np.log(4), abs=1e-4)


def test_supcon_in_large_tau_limit(rng):
    reps = Tensor(rng.standard_normal((5, 4)))
    labels = np.array([0, 0, 1, 1, 1])
    loss = supcon_in(reps, labels, tau=1e6).item()
    # all five anchors have positives and N_in - 1 = 4 competitors each
    assert loss == pytest.approx(np.log(4), abs=1e-4)


def test_supcon_out_empty_side_rejected(rng):
    reps = Tensor(rng.standard_normal((2, 4)))
    empty = Tensor(np.zeros((0, 4)))
    with pytest.raises(ContractError):
        supcon_out(empty, np.array([], dtype=int), reps, np.array([0, 1]), 0.1)


def test_supcon_gradients_match_finite_differences(rng):
    reps_in = Tensor(rng.standard_normal((4, 3)))
    reps_out = Tensor(rng.standard_normal((2, 3)))
    labels_in = np.array([0, 1, 0, 1])
    labels_out = np.array([1, 0])

    def f_in(r):
        return supcon_in(r, labels_in, 0.2)

    def f_out(ro, ri):
        return supcon_out(ro, labels_out, ri, labels_in, 0.2)

    assert grad_check(f_in, [reps_in], rel_tol=1e-4).passed
    assert grad_check(f_out, [reps_out, reps_in], rel_tol=1e-4).passed


# ---------------------------------------------------------------------------
# combined objective

def test_enhanced_total_arithmetic():
    one = Tensor(np.array(1.0))
    two = Tensor(np.array(2.0))
    assert enhanced_total(one, two, 1.0).item() == pytest.approx(1.0)
    assert enhanced_total(one, two, 0.0).item() == pytest.approx(2.0)
    assert enhanced_total(one, two, 0.2).item() == pytest.approx(1.8)
    with pytest.raises(ConfigError):
        enhanced_total(one, two, 1.5)


def test_hyperparams_defaults_and_validation():
    h = LossHyperparams()
    assert (h.q, h.gamma, h.tau) == (0.7, 0.2, 0.1)
    h.validate()
    with pytest.raises(ConfigError):
        LossHyperparams(tau=0.0).validate()
    with pytest.raises(ConfigError):
        LossHyperparams(gamma=-0.1).validate()
