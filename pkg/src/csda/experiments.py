"""Experiment orchestration: zero-shot, few-shot and the ablation ladder."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Corpus, split_few_shot
from .errors import ConfigError
from .evaluation import Metrics, evaluate, mask_recovery_auc
from .losses import LossHyperparams
from .model import CSDAModel, PlainGCNModel
from .synthetic import SynthConfig, generate_synthetic
from .training import (TrainConfig, fine_tune_few_shot, train_plain_gcn,
                       train_zero_shot)

# Ablation ladder, in reporting order. Each entry names the supervised loss
# components the variant optimizes; None marks the mask-free baseline.
ABLATION_LADDER: list[tuple[str, tuple[str, ...] | None]] = [
    ("No-Causal", None),
    ("+L_biased", ("biased",)),
    ("+L_causal", ("biased", "causal")),
    ("+L_causal_aug", ("biased", "causal", "causal_aug")),
    ("full", ("biased", "causal", "causal_aug", "biased_aug")),
]


@dataclass
class ExperimentConfig:
    kind: str                      # zero_shot | few_shot | ablation
    seeds: list[int] = field(default_factory=lambda: [0])
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    few_shot_fraction: float = 0.2
    finetune_epochs: int = 10
    finetune_learning_rate: float = 5e-4
    finetune_from_scratch: bool = False

    def validate(self) -> None:
        if self.kind not in ("zero_shot", "few_shot", "ablation"):
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if not self.seeds:
            raise ConfigError("seeds list must be non-empty")
        self.synth.validate()
        self.train.validate()


def _mean_std(values: list[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def _train_full_csda(train: Corpus, val: Corpus, cfg: ExperimentConfig,
                     seed: int) -> tuple[CSDAModel, list[dict]]:
    tcfg = TrainConfig(**{**cfg.train.__dict__, "seed": seed})
    model = CSDAModel(cfg.synth.feature_dim, seed=seed,
                      infer_zero_bias=tcfg.infer_zero_bias)
    return train_zero_shot(model, train, val, tcfg)


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Generate data, train, optionally fine-tune, and evaluate per seed."""
    cfg.validate()
    if cfg.kind == "ablation":
        return ablation_suite(cfg)
    t0 = time.time()
    per_seed = []
    for seed in cfg.seeds:
        synth = SynthConfig(**{**cfg.synth.__dict__, "seed": seed})
        train, val, ood = generate_synthetic(synth)
        model, history = _train_full_csda(train, val, cfg, seed)
        ood_label_reads_after_training = ood.label_reads

        entry = {"seed": seed, "epochs_trained": len(history),
                 "ood_label_reads_after_training": ood_label_reads_after_training}
        if cfg.kind == "zero_shot":
            entry["val_metrics"] = evaluate(model, val).to_dict()
            entry["ood_metrics"] = evaluate(model, ood).to_dict()
            entry["mask_auc"] = mask_recovery_auc(model, ood)
        else:  # few_shot
            labelled, test = split_few_shot(ood, cfg.few_shot_fraction, seed)
            entry["zero_shot_ood_metrics"] = evaluate(model, test).to_dict()
            if cfg.finetune_from_scratch:
                model = CSDAModel(synth.feature_dim, seed=seed,
                                  infer_zero_bias=cfg.train.infer_zero_bias)
            ft_cfg = TrainConfig(**{**cfg.train.__dict__, "seed": seed,
                                    "epochs": cfg.finetune_epochs,
                                    "learning_rate": cfg.finetune_learning_rate,
                                    "checkpoint_path": None, "log_path": None})
            model, _ = fine_tune_few_shot(model, train, labelled, ft_cfg)
            entry["val_metrics"] = evaluate(model, val).to_dict()
            entry["ood_metrics"] = evaluate(model, test).to_dict()
            entry["mask_auc"] = mask_recovery_auc(model, test)
        per_seed.append(entry)

    report = {
        "kind": cfg.kind,
        "config": _config_echo(cfg),
        "seeds": cfg.seeds,
        "per_seed": per_seed,
        "ood_accuracy": _mean_std([e["ood_metrics"]["accuracy"] for e in per_seed]),
        "mask_auc": _mean_std([e["mask_auc"] for e in per_seed]),
        "elapsed_seconds": time.time() - t0,
    }
    if cfg.kind == "few_shot":
        report["zero_shot_ood_accuracy"] = _mean_std(
            [e["zero_shot_ood_metrics"]["accuracy"] for e in per_seed])
    return report


def _run_variant(name: str, components: tuple[str, ...] | None,
                 train: Corpus, val: Corpus, ood: Corpus,
                 cfg: ExperimentConfig, seed: int) -> dict:
    tcfg = TrainConfig(**{**cfg.train.__dict__, "seed": seed,
                          "loss_components": components,
                          "checkpoint_path": None, "log_path": None})
    if name == "No-Causal":
        model = PlainGCNModel(cfg.synth.feature_dim, seed=seed)
        model, history = train_plain_gcn(model, train, val, tcfg)
        auc = None
    else:
        model = CSDAModel(cfg.synth.feature_dim, seed=seed,
                          infer_zero_bias=tcfg.infer_zero_bias)
        model, history = train_zero_shot(model, train, val, tcfg)
        auc = mask_recovery_auc(model, ood)
    m = evaluate(model, ood)
    return {"variant": name, "seed": seed, "ood_metrics": m.to_dict(),
            "epochs_trained": len(history), "mask_auc": auc}


def ablation_suite(cfg: ExperimentConfig) -> dict:
    """Train the five-variant ladder under shared seeds; report OOD accuracy."""
    cfg.validate()
    t0 = time.time()
    runs_by_variant: dict[str, list[dict]] = {name: [] for name, _ in ABLATION_LADDER}
    for seed in cfg.seeds:
        synth = SynthConfig(**{**cfg.synth.__dict__, "seed": seed})
        train, val, ood = generate_synthetic(synth)
        for name, components in ABLATION_LADDER:
            runs_by_variant[name].append(
                _run_variant(name, components, train, val, ood, cfg, seed))
    rows = []
    for name, _ in ABLATION_LADDER:
        runs = runs_by_variant[name]
        accs = [r["ood_metrics"]["accuracy"] for r in runs]
        row = {"variant": name, "per_seed": runs,
               "ood_accuracy": _mean_std(accs)}
        aucs = [r["mask_auc"] for r in runs if r["mask_auc"] is not None]
        if aucs:
            row["mask_auc"] = _mean_std(aucs)
        rows.append(row)
    return {"kind": "ablation", "config": _config_echo(cfg), "seeds": cfg.seeds,
            "ladder": rows, "elapsed_seconds": time.time() - t0}


def _config_echo(cfg: ExperimentConfig) -> dict:
    echo = dict(cfg.__dict__)
    echo["synth"] = dict(cfg.synth.__dict__)
    echo["train"] = dict(cfg.train.__dict__)
    echo["train"]["hyper"] = dict(cfg.train.hyper.__dict__)
    echo["train"]["loss_components"] = (list(cfg.train.loss_components)
                                        if cfg.train.loss_components else None)
    return echo


def report_without_timing(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "elapsed_seconds"}


def save_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
