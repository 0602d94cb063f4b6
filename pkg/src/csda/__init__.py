"""Causal-subgraph fake news detection on propagation graphs."""

from .data import (Corpus, PropagationGraph, FAKE_NEWS, TRUE_NEWS,
                   IN_DISTRIBUTION, OUT_OF_DISTRIBUTION, load_corpus,
                   save_corpus, normalize_adjacency, split_few_shot)
from .losses import LossBundle, LossHyperparams
from .model import CSDAModel, GraphBatch, PlainGCNModel
from .synthetic import SynthConfig, generate_synthetic
from .training import TrainConfig, fine_tune_few_shot, train_zero_shot
from .evaluation import Metrics, evaluate, mask_recovery_auc
from .experiments import ExperimentConfig, ablation_suite, run_experiment

__version__ = "0.1.0"
