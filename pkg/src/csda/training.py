"""Optimization loops: zero-shot training and few-shot OOD fine-tuning.

All randomness is derived statelessly from (seed, epoch, step), so a run is
exactly reproducible from its config and a checkpoint resume continues the
original trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Corpus, IN_DISTRIBUTION, OUT_OF_DISTRIBUTION, PropagationGraph
from .errors import ConfigError, ContractError
from .losses import (LossBundle, LossHyperparams, assemble_losses,
                     cross_entropy_loss, enhanced_total, supcon_in,
                     supcon_out, swap_augment)
from .model import CSDAModel, GraphBatch, PlainGCNModel, TRAIN


# Zero-shot training curriculum.  The swapped-bias term joins once the causal
# branch has a foothold (training all four terms from scratch lets an early
# bias-aligned solution capture the masks), the learning rate steps down late
# to settle the masks, and checkpoint selection skips the opening epochs whose
# validation peaks reflect shortcut solutions rather than causal ones.
SWAP_BIAS_START_EPOCH = 30
LR_DECAY_EPOCH = 60
LR_DECAY_FACTOR = 0.2
SELECTION_BURN_IN = 20


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    hyper: LossHyperparams = field(default_factory=LossHyperparams)
    patience: int = 10
    checkpoint_path: str | None = None
    log_path: str | None = None
    infer_zero_bias: bool = False
    loss_components: tuple[str, ...] | None = None  # None = full objective
    check_detachment: bool = False

    def validate(self) -> None:
        if self.epochs < 0 or self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("epochs, learning_rate and weight_decay must be non-negative")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        self.hyper.validate()


class Adam:
    """Adaptive-moment optimizer over named parameters."""

    def __init__(self, params: dict[str, ad.Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.tensor.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.tensor.data) for name, p in params.items()}

    def step(self, grads: dict[int, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(p.tensor.node_id)
            g = np.zeros_like(p.tensor.data) if g is None else np.asarray(g)
            if self.weight_decay:
                g = g + self.weight_decay * p.tensor.data
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            if not np.any(g) and not np.any(self.m[name]):
                continue  # untouched parameter: no movement, keeps moments zero
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.tensor.data = p.tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array(float(self.t))}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["opt.step"])
        for name in self.params:
            self.m[name] = arrays[f"opt.m.{name}"].copy()
            self.v[name] = arrays[f"opt.v.{name}"].copy()


def make_batches(corpus: Corpus, batch_size: int, seed: int,
                 epoch: int) -> list[list[PropagationGraph]]:
    """Epoch-shuffled batches; a trailing singleton is merged into its predecessor."""
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    n = len(corpus)
    if n < 2:
        raise ContractError(f"corpus of size {n} cannot form a batch")
    rng = np.random.default_rng([seed, epoch, 101])
    order = rng.permutation(n)
    batches = [order[i:i + batch_size].tolist() for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2].extend(batches.pop())
    return [[corpus.graphs[i] for i in idx] for idx in batches]


def _batch_labels(graphs: list[PropagationGraph]) -> np.ndarray:
    labels = [g.label for g in graphs]
    if any(lab is None for lab in labels):
        raise ContractError("training batch contains unlabelled graphs")
    return np.asarray(labels, dtype=np.int64)


def _csda_bundle(model: CSDAModel, batch: GraphBatch,
                 hyper: LossHyperparams, rng: np.random.Generator) -> LossBundle:
    out = model.forward_batch(batch, TRAIN)
    labels = batch.labels
    probs_c = model.classify(out.z_causal_live, "c")
    probs_b = model.classify(out.z_biased_live, "b")
    views = swap_augment(out.z_c, out.z_b, labels, rng)
    probs_c_aug = model.classify(views.causal_live, "c")
    probs_b_aug = model.classify(views.biased_live, "b")
    bundle = assemble_losses(probs_c, probs_b, probs_c_aug, probs_b_aug,
                             labels, views.labels_permuted, hyper)
    bundle._outputs = out  # fine-tuning reuses z_c for the contrastive terms
    return bundle


def _check_finite(loss: Tensor, graphs: list[PropagationGraph]) -> None:
    if not np.isfinite(loss.data):
        ids = [g.graph_id for g in graphs[:4]]
        raise RuntimeError(f"non-finite loss on batch starting with graphs {ids}")


def _assert_detached(model: CSDAModel, grads_biased: dict, grads_causal: dict) -> None:
    for p in model.parameters_of("encoder_c"):
        g = grads_biased.get(p.tensor.node_id)
        if g is not None and np.any(g):
            raise AssertionError(f"L_biased leaked gradient into {p.name}")
    for p in model.parameters_of("encoder_b"):
        g = grads_causal.get(p.tensor.node_id)
        if g is not None and np.any(g):
            raise AssertionError(f"L_causal leaked gradient into {p.name}")


def train_step(model: CSDAModel, graphs: list[PropagationGraph],
               hyper: LossHyperparams, optimizer: Adam,
               rng: np.random.Generator,
               components: tuple[str, ...] | None = None,
               check_detachment: bool = False) -> LossBundle:
    """One forward/backward/update step on a labelled mini-batch."""
    batch = GraphBatch.from_graphs(graphs, _batch_labels(graphs))
    with Tape():
        bundle = _csda_bundle(model, batch, hyper, rng)
        loss = bundle.objective(set(components) if components else None)
        _check_finite(loss, graphs)
        grads = ad.backward(loss)
        if check_detachment:
            _assert_detached(model, ad.backward(bundle.biased), ad.backward(bundle.causal))
    optimizer.step(grads)
    return bundle


def _plain_train_step(model: PlainGCNModel, graphs: list[PropagationGraph],
                      optimizer: Adam) -> float:
    batch = GraphBatch.from_graphs(graphs, _batch_labels(graphs))
    with Tape():
        loss = cross_entropy_loss(model.probs(batch), batch.labels)
        _check_finite(loss, graphs)
        grads = ad.backward(loss)
    optimizer.step(grads)
    return loss.item()


def _accuracy(model, corpus: Corpus, chunk: int = 64) -> float:
    labels = corpus.read_labels()
    preds = []
    for i in range(0, len(corpus), chunk):
        preds.append(model.predict(corpus.graphs[i:i + chunk]).argmax(axis=1))
    return float((np.concatenate(preds) == labels).mean())


class _JsonlLogger:
    def __init__(self, path):
        self.fh = open(path, "a") if path else None

    def write(self, record: dict) -> None:
        if self.fh:
            self.fh.write(json.dumps(record) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()


@dataclass
class _EarlyStopState:
    best_acc: float = -1.0
    bad_epochs: int = 0
    best_params: dict | None = None


def _training_state_arrays(model, optimizer: Adam, epoch: int,
                           es: _EarlyStopState) -> dict[str, np.ndarray]:
    arrays = dict(model.parameter_arrays())
    arrays.update(optimizer.state_arrays())
    arrays["meta.epoch"] = np.array(float(epoch))
    arrays["meta.best_acc"] = np.array(es.best_acc)
    arrays["meta.bad_epochs"] = np.array(float(es.bad_epochs))
    best = es.best_params if es.best_params is not None else model.parameter_arrays()
    for name, arr in best.items():
        arrays[f"best.{name}"] = arr
    return arrays


def save_training_checkpoint(path, model, optimizer: Adam, epoch: int,
                             es: _EarlyStopState | None = None) -> None:
    ad.save_checkpoint(path, _training_state_arrays(model, optimizer, epoch,
                                                    es or _EarlyStopState()))


def load_training_checkpoint(path, model, optimizer: Adam | None = None):
    """Restore model (and optionally optimizer) state; returns (epoch, es state)."""
    arrays = ad.load_checkpoint(path)
    model.load_parameter_arrays({n: a for n, a in arrays.items()
                                 if not n.startswith(("opt.", "meta.", "best."))})
    if optimizer is not None and "opt.step" in arrays:
        optimizer.load_state_arrays(arrays)
    epoch = int(arrays.get("meta.epoch", np.array(0.0)))
    es = _EarlyStopState(
        best_acc=float(arrays.get("meta.best_acc", np.array(-1.0))),
        bad_epochs=int(arrays.get("meta.bad_epochs", np.array(0.0))),
        best_params={n[len("best."):]: a for n, a in arrays.items()
                     if n.startswith("best.")} or None,
    )
    return epoch, es


def train_zero_shot(model: CSDAModel, train: Corpus, val: Corpus,
                    cfg: TrainConfig, start_epoch: int = 0,
                    optimizer: Adam | None = None,
                    es: _EarlyStopState | None = None):
    """Optimize the full disentangling objective on in-distribution data.

    Early-stops on validation accuracy and leaves the best parameters
    loaded in the model. Returns (model, per-epoch history).
    """
    cfg.validate()
    if train.distribution_tag != IN_DISTRIBUTION or val.distribution_tag != IN_DISTRIBUTION:
        raise ContractError("zero-shot training accepts only IN_DISTRIBUTION corpora")
    train.read_labels()
    optimizer = optimizer or Adam(model.params, lr=cfg.learning_rate,
                                  weight_decay=cfg.weight_decay)
    es = es or _EarlyStopState()
    log = _JsonlLogger(cfg.log_path)
    history: list[dict] = []
    burn_in = min(SELECTION_BURN_IN, cfg.epochs // 5)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            optimizer.lr = cfg.learning_rate * (LR_DECAY_FACTOR
                                                if epoch >= LR_DECAY_EPOCH else 1.0)
            components = cfg.loss_components
            if components is None and epoch < SWAP_BIAS_START_EPOCH:
                components = ("biased", "causal", "causal_aug")
            sums: dict[str, float] = {}
            n_steps = 0
            for step, graphs in enumerate(make_batches(train, cfg.batch_size,
                                                       cfg.seed, epoch)):
                rng = np.random.default_rng([cfg.seed, epoch, step, 7])
                bundle = train_step(model, graphs, cfg.hyper, optimizer, rng,
                                    components, cfg.check_detachment)
                scalars = bundle.scalars()
                log.write({"epoch": epoch, "step": step, **scalars})
                for k, v in scalars.items():
                    sums[k] = sums.get(k, 0.0) + v
                n_steps += 1
            val_acc = _accuracy(model, val)
            entry = {"epoch": epoch, "val_accuracy": val_acc,
                     **{k: v / n_steps for k, v in sums.items()}}
            history.append(entry)
            if epoch >= burn_in:
                if val_acc > es.best_acc:
                    es.best_acc = val_acc
                    es.bad_epochs = 0
                    es.best_params = {n: a.copy()
                                      for n, a in model.parameter_arrays().items()}
                else:
                    es.bad_epochs += 1
            if cfg.checkpoint_path:
                save_training_checkpoint(cfg.checkpoint_path, model, optimizer,
                                         epoch + 1, es)
            if es.bad_epochs >= cfg.patience:
                break
    finally:
        log.close()
    if es.best_params is not None:
        model.load_parameter_arrays(es.best_params)
        if cfg.checkpoint_path:
            save_training_checkpoint(cfg.checkpoint_path, model, optimizer,
                                     cfg.epochs, es)
    return model, history


def _cycled_ood_order(n_ood: int, needed: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng([seed, epoch, 211])
    reps = []
    total = 0
    while total < needed:
        reps.append(rng.permutation(n_ood))
        total += n_ood
    return np.concatenate(reps)[:needed]


def fine_tune_few_shot(model: CSDAModel, in_dist: Corpus, ood_labelled: Corpus,
                       cfg: TrainConfig):
    """Continue training with mixed batches and the contrastive objective.

    Each batch holds cfg.batch_size in-distribution graphs plus up to
    batch_size // 2 labelled OOD graphs (cycled with reshuffling). The
    supervised terms use all labelled samples in the batch; the contrastive
    terms use the batch's in/OOD partition of causal representations.
    """
    cfg.validate()
    if len(ood_labelled) == 0:
        raise ContractError("fine-tuning requires a non-empty labelled OOD corpus")
    in_dist.read_labels()
    ood_labelled.read_labels()
    optimizer = Adam(model.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    n_out_per_batch = min(cfg.batch_size // 2, len(ood_labelled))
    log = _JsonlLogger(cfg.log_path)
    history: list[dict] = []
    try:
        for epoch in range(cfg.epochs):
            batches = make_batches(in_dist, cfg.batch_size, cfg.seed, epoch)
            ood_order = _cycled_ood_order(len(ood_labelled),
                                          n_out_per_batch * len(batches),
                                          cfg.seed, epoch)
            sums: dict[str, float] = {}
            for step, in_graphs in enumerate(batches):
                ood_graphs = [ood_labelled.graphs[i] for i in
                              ood_order[step * n_out_per_batch:(step + 1) * n_out_per_batch]]
                graphs = in_graphs + ood_graphs
                n_in = len(in_graphs)
                labels = _batch_labels(graphs)
                batch = GraphBatch.from_graphs(graphs, labels)
                rng = np.random.default_rng([cfg.seed, epoch, step, 7])
                with Tape():
                    bundle = _csda_bundle(model, batch, cfg.hyper, rng)
                    z_c = bundle._outputs.z_c
                    reps_in = ad.take_rows(z_c, np.arange(n_in))
                    reps_out = ad.take_rows(z_c, np.arange(n_in, len(graphs)))
                    bundle.cl_in = supcon_in(reps_in, labels[:n_in], cfg.hyper.tau)
                    bundle.cl_out = supcon_out(reps_out, labels[n_in:],
                                               reps_in, labels[:n_in], cfg.hyper.tau)
                    bundle.cl = ad.add(bundle.cl_in, bundle.cl_out)
                    sup = bundle.objective(set(cfg.loss_components)
                                           if cfg.loss_components else None)
                    bundle.enhanced = enhanced_total(sup, bundle.cl, cfg.hyper.gamma)
                    _check_finite(bundle.enhanced, graphs)
                    grads = ad.backward(bundle.enhanced)
                optimizer.step(grads)
                scalars = bundle.scalars()
                log.write({"epoch": epoch, "step": step, **scalars})
                for k, v in scalars.items():
                    sums[k] = sums.get(k, 0.0) + v
            history.append({"epoch": epoch,
                            **{k: v / len(batches) for k, v in sums.items()}})
    finally:
        log.close()
    if cfg.checkpoint_path:
        save_training_checkpoint(cfg.checkpoint_path, model, optimizer, cfg.epochs)
    return model, history


def train_plain_gcn(model: PlainGCNModel, train: Corpus, val: Corpus,
                    cfg: TrainConfig):
    """Train the No-Causal baseline with plain cross-entropy."""
    cfg.validate()
    if train.distribution_tag != IN_DISTRIBUTION or val.distribution_tag != IN_DISTRIBUTION:
        raise ContractError("baseline training accepts only IN_DISTRIBUTION corpora")
    train.read_labels()
    optimizer = Adam(model.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    es = _EarlyStopState()
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        losses = [_plain_train_step(model, graphs, optimizer)
                  for graphs in make_batches(train, cfg.batch_size, cfg.seed, epoch)]
        val_acc = _accuracy(model, val)
        history.append({"epoch": epoch, "val_accuracy": val_acc,
                        "loss_ce": float(np.mean(losses))})
        if val_acc > es.best_acc:
            es.best_acc = val_acc
            es.bad_epochs = 0
            es.best_params = {n: a.copy() for n, a in model.parameter_arrays().items()}
        else:
            es.bad_epochs += 1
        if es.bad_epochs >= cfg.patience:
            break
    if es.best_params is not None:
        model.load_parameter_arrays(es.best_params)
    return model, history
