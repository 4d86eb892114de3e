"""Accuracy and macro-F1 for task and concept predictions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Split, token_counts
from .model import MaskSet, ModelParams, predict_batch


def accuracy(preds, golds) -> float:
    preds = np.asarray(preds)
    golds = np.asarray(golds)
    if preds.size == 0 or preds.shape != golds.shape:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    return float((preds == golds).mean())


def macro_f1(preds, golds, num_classes: int) -> float:
    """Unweighted mean of per-class F1.

    Classes absent from both predictions and labels are excluded from the
    mean; a class with P + R == 0 contributes zero.
    """
    preds = np.asarray(preds)
    golds = np.asarray(golds)
    if preds.size == 0 or preds.shape != golds.shape:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    if preds.max(initial=0) >= num_classes or golds.max(initial=0) >= num_classes:
        raise ValueError("labels outside [0, num_classes)")
    f1s = []
    for c in range(num_classes):
        tp = int(np.sum((preds == c) & (golds == c)))
        fp = int(np.sum((preds == c) & (golds != c)))
        fn = int(np.sum((preds != c) & (golds == c)))
        if tp + fp + fn == 0:
            continue
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return float(np.mean(f1s)) if f1s else 0.0


@dataclass
class MetricReport:
    task: dict
    concepts: dict          # per-concept {"accuracy", "macro_f1"}
    concept_mean: dict      # unweighted means across concepts

    def to_dict(self) -> dict:
        return {"task": self.task, "concepts": self.concepts, "concept_mean": self.concept_mean}

    def format_text(self) -> str:
        lines = [
            f"task      acc {100 * self.task['accuracy']:.1f}  f1 {100 * self.task['macro_f1']:.1f}",
            f"concepts  acc {100 * self.concept_mean['accuracy']:.1f}  f1 {100 * self.concept_mean['macro_f1']:.1f}",
        ]
        for name, score in self.concepts.items():
            lines.append(
                f"  {name:<16} acc {100 * score['accuracy']:.1f}  f1 {100 * score['macro_f1']:.1f}"
            )
        return "\n".join(lines)


def evaluate_split(split: Split, params: ModelParams, masks: MaskSet | None) -> MetricReport:
    """One prediction pass; concept metrics averaged unweighted over concepts."""
    counts, lengths = token_counts(split, params.embeddings.shape[0])
    pooled = (counts @ params.embeddings) / lengths[:, None]
    task_pred, concept_pred = predict_batch(pooled, params, masks)
    task_gold = split.task_labels()
    concept_gold = split.concept_matrix()
    schema = split.schema
    task = {
        "accuracy": accuracy(task_pred, task_gold),
        "macro_f1": macro_f1(task_pred, task_gold, schema.task_class_count),
    }
    concepts = {}
    for k, name in enumerate(schema.concept_names):
        concepts[name] = {
            "accuracy": accuracy(concept_pred[:, k], concept_gold[:, k]),
            "macro_f1": macro_f1(concept_pred[:, k], concept_gold[:, k], schema.n_concept_classes),
        }
    concept_mean = {
        "accuracy": float(np.mean([c["accuracy"] for c in concepts.values()])),
        "macro_f1": float(np.mean([c["macro_f1"] for c in concepts.values()])),
    }
    return MetricReport(task=task, concepts=concepts, concept_mean=concept_mean)
