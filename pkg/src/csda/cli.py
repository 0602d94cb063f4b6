"""Command-line entry point.

Subcommands: gen | train | finetune | eval | explain | ablate | experiment.
All take JSON config files (keys mirror the config dataclass fields) plus a
few flag overrides; outputs are JSON reports and JSON-lines corpora/logs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .data import (IN_DISTRIBUTION, OUT_OF_DISTRIBUTION, load_corpus,
                   save_corpus, split_few_shot)
from .errors import ConfigError
from .evaluation import evaluate, export_mask_report
from .experiments import (ExperimentConfig, ablation_suite, run_experiment,
                          save_report)
from .losses import LossHyperparams
from .model import CSDAModel
from .synthetic import SynthConfig, generate_synthetic
from .training import (TrainConfig, fine_tune_few_shot,
                       load_training_checkpoint, train_zero_shot)
from . import autodiff as ad


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg})") from None


def _synth_config(d: dict) -> SynthConfig:
    d = dict(d)
    for key in ("node_range", "branching_range"):
        if key in d:
            d[key] = tuple(d[key])
    return SynthConfig(**d)


def _train_config(d: dict) -> TrainConfig:
    d = dict(d)
    if "hyper" in d:
        d["hyper"] = LossHyperparams(**d["hyper"])
    if d.get("loss_components") is not None:
        d["loss_components"] = tuple(d["loss_components"])
    return TrainConfig(**d)


def _experiment_config(d: dict) -> ExperimentConfig:
    d = dict(d)
    if "synth" in d:
        d["synth"] = _synth_config(d["synth"])
    if "train" in d:
        d["train"] = _train_config(d["train"])
    return ExperimentConfig(**d)


def _load_model(checkpoint: str, feature_dim: int,
                infer_zero_bias: bool = False) -> CSDAModel:
    model = CSDAModel(feature_dim, infer_zero_bias=infer_zero_bias)
    load_training_checkpoint(checkpoint, model)
    return model


def _cmd_gen(args) -> int:
    cfg = _synth_config(_load_json(args.config))
    train, val, ood = generate_synthetic(cfg)
    os.makedirs(args.out, exist_ok=True)
    save_corpus(train, os.path.join(args.out, "train.jsonl"))
    save_corpus(val, os.path.join(args.out, "val.jsonl"))
    save_corpus(ood, os.path.join(args.out, "ood.jsonl"))
    print(json.dumps({"out": args.out, "n_train": len(train),
                      "n_val": len(val), "n_ood": len(ood)}))
    return 0


def _cmd_train(args) -> int:
    cfg = _load_json(args.config)
    tcfg = _train_config(cfg.get("train", {}))
    if args.checkpoint:
        tcfg.checkpoint_path = args.checkpoint
    if not tcfg.checkpoint_path:
        raise ConfigError("train: set train.checkpoint_path or pass --checkpoint")
    train = load_corpus(cfg["train_corpus"], IN_DISTRIBUTION)
    val = load_corpus(cfg["val_corpus"], IN_DISTRIBUTION)
    model = CSDAModel(train.feature_dim, seed=tcfg.seed,
                      infer_zero_bias=tcfg.infer_zero_bias)
    model, history = train_zero_shot(model, train, val, tcfg)
    print(json.dumps({"checkpoint": tcfg.checkpoint_path,
                      "epochs_trained": len(history),
                      "best_val_accuracy": max((h["val_accuracy"] for h in history),
                                               default=None)}))
    return 0


def _cmd_finetune(args) -> int:
    cfg = _load_json(args.config)
    tcfg = _train_config(cfg.get("train", {}))
    train = load_corpus(cfg["train_corpus"], IN_DISTRIBUTION)
    ood = load_corpus(cfg["ood_labelled_corpus"], OUT_OF_DISTRIBUTION)
    model = CSDAModel(train.feature_dim, seed=tcfg.seed,
                      infer_zero_bias=tcfg.infer_zero_bias)
    if not args.from_scratch:
        load_training_checkpoint(args.checkpoint, model)
    out_path = cfg.get("output_checkpoint", args.checkpoint + ".finetuned")
    tcfg.checkpoint_path = out_path
    model, history = fine_tune_few_shot(model, train, ood, tcfg)
    print(json.dumps({"checkpoint": out_path, "epochs_trained": len(history)}))
    return 0


def _cmd_eval(args) -> int:
    corpus = load_corpus(args.data, args.tag)
    model = _load_model(args.checkpoint, corpus.feature_dim, args.infer_zero_bias)
    metrics = evaluate(model, corpus)
    print(json.dumps(metrics.to_dict(), indent=2))
    return 0


def _cmd_explain(args) -> int:
    corpus = load_corpus(args.data, args.tag)
    model = _load_model(args.checkpoint, corpus.feature_dim)
    export_mask_report(model, corpus, args.out)
    print(json.dumps({"out": args.out, "graphs": len(corpus)}))
    return 0


def _cmd_ablate(args) -> int:
    cfg = _experiment_config({**_load_json(args.config), "kind": "ablation"})
    report = ablation_suite(cfg)
    if args.out:
        save_report(report, args.out)
    print(json.dumps(report, indent=2))
    return 0


def _cmd_experiment(args) -> int:
    cfg = _experiment_config(_load_json(args.config))
    report = run_experiment(cfg)
    if args.out:
        save_report(report, args.out)
    print(json.dumps(report, indent=2))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csda",
        description="Causal-subgraph fake news detection on propagation graphs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("train", help="zero-shot training on in-distribution data")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", help="override train.checkpoint_path")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("finetune", help="few-shot fine-tuning with labelled OOD data")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--from-scratch", action="store_true",
                   help="retrain jointly instead of continuing from the checkpoint")
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tag", default=OUT_OF_DISTRIBUTION,
                   choices=[IN_DISTRIBUTION, OUT_OF_DISTRIBUTION])
    p.add_argument("--infer-zero-bias", action="store_true")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("explain", help="export per-node/per-edge mask scores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tag", default=OUT_OF_DISTRIBUTION,
                   choices=[IN_DISTRIBUTION, OUT_OF_DISTRIBUTION])
    p.set_defaults(fn=_cmd_explain)

    p = sub.add_parser("ablate", help="run the five-variant ablation ladder")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("experiment", help="run a full seeded experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, OSError, RuntimeError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
