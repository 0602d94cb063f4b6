"""Training objectives.

The biased branch minimizes a generalized cross-entropy (1 - p_y^q)/q that
amplifies confidently fit samples, so it absorbs the easy spurious signal.
The causal branch minimizes a cross-entropy reweighted per sample by
W = CE_b / (CE_b + CE_c), computed on detached values, which up-weights
bias-conflicting samples. A batch-wise swap of biased embeddings (with
labels permuted for the biased branch) decorrelates the two embeddings.
Supervised contrastive terms over causal representations align labelled
in-distribution and out-of-distribution samples during fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError

_PROB_LO = 1e-12
_PROB_HI = 1.0 - 1e-12


@dataclass
class LossHyperparams:
    q: float = 0.7      # GCE exponent
    gamma: float = 0.2  # fine-tuning mixing weight
    tau: float = 0.1    # contrastive temperature

    def validate(self) -> None:
        if not 0.0 < self.q <= 1.0:
            raise ConfigError(f"q must be in (0, 1], got {self.q}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.tau <= 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


@dataclass
class LossBundle:
    biased: Tensor
    causal: Tensor
    dis: Tensor
    causal_aug: Tensor
    biased_aug: Tensor
    swap: Tensor
    total: Tensor
    cl_in: Tensor | None = None
    cl_out: Tensor | None = None
    cl: Tensor | None = None
    enhanced: Tensor | None = None

    def scalars(self) -> dict[str, float]:
        out = {}
        for name in ("biased", "causal", "dis", "causal_aug", "biased_aug",
                     "swap", "total", "cl_in", "cl_out", "cl", "enhanced"):
            t = getattr(self, name)
            if t is not None:
                out[f"loss_{name}"] = t.item()
        return out

    def objective(self, components: set[str] | None = None) -> Tensor:
        """Sum of the selected supervised components (None = full objective)."""
        if components is None:
            return self.total
        parts = [getattr(self, name) for name in
                 ("biased", "causal", "causal_aug", "biased_aug") if name in components]
        if not parts:
            raise ConfigError("no loss components selected")
        out = parts[0]
        for p in parts[1:]:
            out = ad.add(out, p)
        return out


def cross_entropy_per_sample(probs: Tensor, labels: np.ndarray) -> Tensor:
    """-log p_y per sample; probabilities clamped away from 0 and 1."""
    p_y = ad.clamp(ad.pick(probs, labels), _PROB_LO, _PROB_HI)
    return ad.neg(ad.log(p_y))


def cross_entropy_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    return ad.mean_all(cross_entropy_per_sample(probs, labels))


def gce_loss(probs: Tensor, labels: np.ndarray, q: float) -> Tensor:
    """Mean of (1 - p_y^q)/q over the batch."""
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"q must be in (0, 1], got {q}")
    p_y = ad.clamp(ad.pick(probs, labels), _PROB_LO, _PROB_HI)
    per_sample = ad.scale(ad.add_scalar(ad.neg(ad.power(p_y, q)), 1.0), 1.0 / q)
    return ad.mean_all(per_sample)


def reweight_factors(ce_causal: np.ndarray, ce_biased: np.ndarray) -> np.ndarray:
    """W = CE_b / (CE_b + CE_c + 1e-12) on detached per-sample CE values."""
    return ce_biased / (ce_biased + ce_causal + 1e-12)


def reweighted_ce_loss(probs_causal: Tensor, probs_biased: Tensor,
                       labels_causal: np.ndarray,
                       labels_biased: np.ndarray | None = None) -> Tensor:
    """Mean of W * CE_c with W held constant and CE_c live for gradients.

    The biased CE inside W is evaluated against the labels the biased view
    is actually paired with (the permuted ones on augmented views), keeping
    W a measure of biased-branch failure rather than a selector correlated
    with the swapped-in bias vectors.
    """
    if labels_biased is None:
        labels_biased = labels_causal
    ce_c = cross_entropy_per_sample(probs_causal, labels_causal)
    ce_b = cross_entropy_per_sample(probs_biased, labels_biased)
    w = reweight_factors(ad.detach(ce_c).data, ad.detach(ce_b).data)
    return ad.mean_all(ad.mul(Tensor(w), ce_c))


@dataclass
class SwapViews:
    """Permuted-bias embedding views, with detachment mirroring the forward pass."""
    causal_live: Tensor      # z_c (+) detach(z_b[pi])
    biased_live: Tensor      # detach(z_c) (+) z_b[pi]
    labels_permuted: np.ndarray
    permutation: np.ndarray


def swap_augment(z_c: Tensor, z_b: Tensor, labels: np.ndarray,
                 rng: np.random.Generator) -> SwapViews:
    """One uniform permutation applied to both the bias rows and the labels."""
    b = z_c.shape[0]
    if b < 2:
        raise ContractError(f"swap_augment needs a batch of >= 2, got {b}")
    perm = rng.permutation(b)
    z_b_perm = ad.take_rows(z_b, perm)
    causal_live = ad.concat([z_c, ad.detach(z_b_perm)], axis=1)
    biased_live = ad.concat([ad.detach(z_c), z_b_perm], axis=1)
    return SwapViews(causal_live, biased_live, labels[perm], perm)


def assemble_losses(probs_c: Tensor, probs_b: Tensor,
                    probs_c_aug: Tensor, probs_b_aug: Tensor,
                    labels: np.ndarray, labels_permuted: np.ndarray,
                    hyper: LossHyperparams) -> LossBundle:
    """All supervised loss components plus their defining sums."""
    biased = gce_loss(probs_b, labels, hyper.q)
    causal = reweighted_ce_loss(probs_c, probs_b, labels)
    dis = ad.add(biased, causal)
    # the causal pairing is unchanged by the bias swap, so the augmented
    # causal CE still targets the original labels; the biased branch targets
    # the permuted ones
    causal_aug = reweighted_ce_loss(probs_c_aug, probs_b_aug, labels, labels_permuted)
    biased_aug = gce_loss(probs_b_aug, labels_permuted, hyper.q)
    swap = ad.add(causal_aug, biased_aug)
    total = ad.add(dis, swap)
    return LossBundle(biased, causal, dis, causal_aug, biased_aug, swap, total)


# ---------------------------------------------------------------------------
# contrastive objectives

def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors (norms floored at 1e-12)."""
    an = ad.l2_normalize_rows(ad.reshape(a, (1, -1)))
    bn = ad.l2_normalize_rows(ad.reshape(b, (1, -1)))
    return ad.reshape(ad.matmul(an, ad.transpose(bn)), ())


def supcon_in(reps_in: Tensor, labels_in: np.ndarray, tau: float) -> Tensor:
    """In-distribution supervised contrastive loss.

    Anchors and positives both range over the batch; the denominator for
    anchor n sums over all k != n. Anchors without positives contribute 0
    while still counting in the outer 1/N mean.
    """
    n = reps_in.shape[0]
    if n < 2:
        raise ContractError(f"supcon_in needs >= 2 samples, got {n}")
    rn = ad.l2_normalize_rows(reps_in)
    sims = ad.scale(ad.matmul(rn, ad.transpose(rn)), 1.0 / tau)
    e = ad.exp(sims)
    diag = ad.pick(e, np.arange(n))
    denom = ad.sub(ad.rowsum(e), diag)
    log_denom = ad.log(denom)

    same = labels_in[:, None] == labels_in[None, :]
    pos_mask = (same & ~np.eye(n, dtype=bool)).astype(np.float64)
    pos_counts = pos_mask.sum(axis=1)
    has_pos = (pos_counts > 0).astype(np.float64)
    inv_counts = np.divide(1.0, pos_counts, out=np.zeros(n), where=pos_counts > 0)

    pos_sum = ad.rowsum(ad.mul(sims, Tensor(pos_mask)))
    per_anchor = ad.sub(ad.mul(pos_sum, Tensor(inv_counts)),
                        ad.mul(log_denom, Tensor(has_pos)))
    return ad.scale(ad.sum_all(per_anchor), -1.0 / n)


def supcon_out(reps_out: Tensor, labels_out: np.ndarray,
               reps_in: Tensor, labels_in: np.ndarray, tau: float) -> Tensor:
    """Cross-distribution supervised contrastive loss.

    Anchors are OOD samples; positives are in-distribution samples with the
    same label; the denominator sums over every in-distribution sample.
    """
    n_out, n_in = reps_out.shape[0], reps_in.shape[0]
    if n_out < 1 or n_in < 1:
        raise ContractError("supcon_out needs at least one sample on each side")
    ro = ad.l2_normalize_rows(reps_out)
    ri = ad.l2_normalize_rows(reps_in)
    sims = ad.scale(ad.matmul(ro, ad.transpose(ri)), 1.0 / tau)
    log_denom = ad.log(ad.rowsum(ad.exp(sims)))

    pos_mask = (labels_out[:, None] == labels_in[None, :]).astype(np.float64)
    pos_counts = pos_mask.sum(axis=1)
    has_pos = (pos_counts > 0).astype(np.float64)
    inv_counts = np.divide(1.0, pos_counts, out=np.zeros(n_out), where=pos_counts > 0)

    pos_sum = ad.rowsum(ad.mul(sims, Tensor(pos_mask)))
    per_anchor = ad.sub(ad.mul(pos_sum, Tensor(inv_counts)),
                        ad.mul(log_denom, Tensor(has_pos)))
    return ad.scale(ad.sum_all(per_anchor), -1.0 / n_out)


def enhanced_total(total: Tensor, cl: Tensor, gamma: float) -> Tensor:
    """gamma * L + (1 - gamma) * L_CL."""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must be in [0, 1], got {gamma}")
    return ad.add(ad.scale(total, gamma), ad.scale(cl, 1.0 - gamma))
