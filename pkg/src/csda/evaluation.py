"""Metrics, mask-recovery AUC and per-graph mask score export."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import Corpus, FAKE_NEWS, TRUE_NEWS
from .errors import ContractError


@dataclass
class Metrics:
    accuracy: float
    true_f1: float   # F1 with TRUE_NEWS as the positive class
    fake_f1: float   # F1 with FAKE_NEWS as the positive class
    confusion: dict[str, int]  # keys "tt", "tf", "ft", "ff" = (actual, predicted)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "true_f1": self.true_f1,
                "fake_f1": self.fake_f1, "confusion": self.confusion}


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def metrics_from_predictions(predictions: np.ndarray, labels: np.ndarray) -> Metrics:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    tt = int(np.sum((labels == TRUE_NEWS) & (predictions == TRUE_NEWS)))
    tf = int(np.sum((labels == TRUE_NEWS) & (predictions == FAKE_NEWS)))
    ft = int(np.sum((labels == FAKE_NEWS) & (predictions == TRUE_NEWS)))
    ff = int(np.sum((labels == FAKE_NEWS) & (predictions == FAKE_NEWS)))
    n = len(labels)
    return Metrics(
        accuracy=(tt + ff) / n,
        true_f1=_f1(tp=tt, fp=ft, fn=tf),
        fake_f1=_f1(tp=ff, fp=tf, fn=ft),
        confusion={"tt": tt, "tf": tf, "ft": ft, "ff": ff},
    )


def evaluate(model, corpus: Corpus, chunk: int = 64) -> Metrics:
    """Accuracy and one-vs-rest F1 for both classes on a labelled corpus."""
    labels = corpus.read_labels()
    preds = []
    for i in range(0, len(corpus), chunk):
        preds.append(model.predict(corpus.graphs[i:i + chunk]).argmax(axis=1))
    return metrics_from_predictions(np.concatenate(preds), labels)


def roc_auc(scores: np.ndarray, flags: np.ndarray) -> float:
    """ROC-AUC via midranks (ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    n_pos = int(flags.sum())
    n_neg = len(flags) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs both positive and negative examples")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    pos_rank_sum = ranks[flags].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mask_recovery_auc(model, corpus: Corpus) -> float:
    """ROC-AUC of node scores against planted causal flags, pooled over graphs."""
    scores, flags = [], []
    for g in corpus.graphs:
        if g.causal_node_flags is None:
            raise ContractError(f"{g.graph_id}: no causal ground-truth flags")
        alpha, _ = model.mask_scores(g)
        scores.append(alpha)
        flags.append(g.causal_node_flags)
    return roc_auc(np.concatenate(scores), np.concatenate(flags))


def mask_report_record(model, g) -> dict:
    """Table-style per-graph report: node and edge scores plus the prediction."""
    alpha, beta = model.mask_scores(g)
    pred = model.predict([g])[0]
    parent_edge = {int(c): e for e, (p, c) in enumerate(g.edges)}
    nodes = []
    for i in range(g.n_nodes):
        entry = {"index": i, "score": round(float(alpha[i]), 3),
                 "score_full": float(alpha[i])}
        e = parent_edge.get(i)
        if e is not None:
            entry["parent_edge_score"] = round(float(beta[e]), 3)
            entry["parent_edge_score_full"] = float(beta[e])
        nodes.append(entry)
    edges = [{"parent": int(p), "child": int(c),
              "score": round(float(beta[e]), 3), "score_full": float(beta[e])}
             for e, (p, c) in enumerate(g.edges)]
    rec = {"graph_id": g.graph_id,
           "prediction": "fake" if int(pred.argmax()) == FAKE_NEWS else "true",
           "prediction_probs": [float(x) for x in pred],
           "label": {TRUE_NEWS: "true", FAKE_NEWS: "fake"}.get(g.label),
           "nodes": nodes, "edges": edges}
    return rec


def export_mask_report(model, corpus: Corpus, out_path) -> None:
    """One JSON-lines record per graph, nodes ordered by index."""
    try:
        with open(out_path, "w") as fh:
            for g in corpus.graphs:
                fh.write(json.dumps(mask_report_record(model, g)) + "\n")
    except OSError as e:
        raise OSError(f"failed to write mask report to {out_path}: {e}") from e
