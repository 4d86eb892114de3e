"""Decision-pathway explanations at three levels.

Token level: sensitivity of each concept's predicted-class logit to the
token embeddings through that concept's masked branch. Subnetwork level:
mask sparsity, pairwise overlap, and per-layer kept-weight grids rendered as
PGM heatmaps. Concept level: each concept's additive contribution vector to
the task logits, whose sum reproduces the task logits exactly.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .data import Example, DatasetSchema, Vocabulary, _TOKEN_RE
from .errors import DataError
from .model import (
    MaskSet,
    ModelParams,
    encode_from_pooled,
    encoder_backward,
    forward_pathway_batch,
    pooled_embedding,
)


@dataclass
class MaskStats:
    concept_names: list
    sparsity: list                 # per-concept fraction of pruned bits
    jaccard: np.ndarray            # (K, K) overlap of kept-bit sets
    layer_grids: list              # per concept: {block_name: 0/1 grid}

    def to_dict(self) -> dict:
        return {
            "concept_names": list(self.concept_names),
            "sparsity": [float(s) for s in self.sparsity],
            "jaccard": [[float(x) for x in row] for row in self.jaccard],
        }


@dataclass
class PathwayTrace:
    tokens: list
    token_saliency: np.ndarray     # (K, D) gradient-norm per position
    token_grad_input: np.ndarray   # (K, D) |gradient . embedding| per position
    concept_names: list
    concept_logits: np.ndarray     # (K, V)
    activations: np.ndarray        # (K, V)
    concept_preds: np.ndarray      # (K,)
    contributions: np.ndarray      # (K, C)
    task_logits: np.ndarray        # (C,)
    task_pred: int
    mask_stats: MaskStats | None = None

    def to_dict(self) -> dict:
        d = {
            "tokens": list(self.tokens),
            "token_saliency": self.token_saliency.tolist(),
            "token_grad_input": self.token_grad_input.tolist(),
            "concept_names": list(self.concept_names),
            "concept_logits": self.concept_logits.tolist(),
            "activations": self.activations.tolist(),
            "concept_preds": [int(p) for p in self.concept_preds],
            "contributions": self.contributions.tolist(),
            "task_logits": self.task_logits.tolist(),
            "task_pred": int(self.task_pred),
        }
        if self.mask_stats is not None:
            d["mask_stats"] = self.mask_stats.to_dict()
        return d


def token_saliency(example: Example, params: ModelParams, masks: MaskSet | None):
    """(K, D) gradient norms of each concept's predicted-class logit.

    Under mean pooling every position shares the pooled gradient scaled by
    1/D, so entries within a row are equal; rows still differ by concept and
    by mask. Also returns the |gradient . embedding| attribution, which does
    vary across positions. Returns (saliency, grad_input).
    """
    k_total = params.psi_w.shape[0]
    d_tokens = len(example.token_ids)
    saliency = np.zeros((k_total, d_tokens))
    grad_input = np.zeros((k_total, d_tokens))
    pooled = pooled_embedding(example, params)[None, :]
    for k in range(k_total):
        bits = None if masks is None else masks.bits[k]
        delta = None if masks is None or masks.deltas is None else masks.deltas[k]
        z, cache = encode_from_pooled(pooled, params, bits, delta)
        logits = z @ params.psi_w[k].T + params.psi_b[k]
        pred = int(logits[0].argmax())
        d_z = params.psi_w[k][pred][None, :]
        _, _, d_pooled = encoder_backward(cache, d_z)
        if d_tokens:
            per_pos = d_pooled[0] / d_tokens
            saliency[k, :] = np.linalg.norm(per_pos)
            grad_input[k, :] = np.abs(params.embeddings[example.token_ids] @ per_pos)
    return saliency, grad_input


def concept_contributions(trace: PathwayTrace):
    """Contribution vectors plus a ranking toward the predicted class.

    Concepts are ordered by their contribution to the predicted task class's
    logit, largest first (ties to the lowest concept index).
    """
    toward_pred = trace.contributions[:, trace.task_pred]
    ranking = np.argsort(-toward_pred, kind="stable")
    return trace.contributions, ranking


def mask_overlap(masks: MaskSet, block_map, concept_names) -> MaskStats:
    """Sparsity, pairwise Jaccard overlap of kept bits, per-layer grids."""
    bits = masks.bits.astype(bool)
    k_total = bits.shape[0]
    jaccard = np.zeros((k_total, k_total))
    for i in range(k_total):
        for j in range(k_total):
            union = np.logical_or(bits[i], bits[j]).sum()
            if union == 0:
                jaccard[i, j] = 0.0
            else:
                jaccard[i, j] = np.logical_and(bits[i], bits[j]).sum() / union
    grids = []
    for k in range(k_total):
        grid = {
            blk.name: masks.bits[k, blk.offset : blk.stop].reshape(blk.rows, blk.cols)
            for blk in block_map
        }
        grids.append(grid)
    return MaskStats(
        concept_names=list(concept_names),
        sparsity=[float(s) for s in masks.sparsity()],
        jaccard=jaccard,
        layer_grids=grids,
    )


def build_trace(example: Example, params: ModelParams, masks: MaskSet | None,
                schema: DatasetSchema, vocab: Vocabulary | None = None,
                mask_stats: MaskStats | None = None) -> PathwayTrace:
    """Full pathway trace for one example."""
    if example.text and vocab is not None:
        tokens = _TOKEN_RE.findall(example.text.lower())[: schema.max_len]
    elif vocab is not None:
        names = vocab.tokens_by_id()
        tokens = [names[i] for i in example.token_ids]
    else:
        tokens = [str(i) for i in example.token_ids]
    cache = forward_pathway_batch(pooled_embedding(example, params)[None, :], params, masks)
    saliency, grad_input = token_saliency(example, params, masks)
    return PathwayTrace(
        tokens=tokens,
        token_saliency=saliency,
        token_grad_input=grad_input,
        concept_names=list(schema.concept_names),
        concept_logits=cache.concept_logits[0],
        activations=cache.activations[0],
        concept_preds=cache.concept_logits[0].argmax(axis=1),
        contributions=cache.contributions[0],
        task_logits=cache.task_logits[0],
        task_pred=int(cache.task_logits[0].argmax()),
        mask_stats=mask_stats,
    )


def _write_pgm(grid: np.ndarray, path) -> None:
    rows, cols = grid.shape
    lines = [f"P2", f"{cols} {rows}", "255"]
    for r in range(rows):
        lines.append(" ".join("255" if v else "0" for v in grid[r]))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name)


def render_report(trace: PathwayTrace, mask_stats: MaskStats, out_dir) -> list:
    """Write report.json, one PGM per layer per concept, and saliency.csv."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        report_path = os.path.join(out_dir, "report.json")
        doc = trace.to_dict()
        doc["mask_stats"] = mask_stats.to_dict()
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, ensure_ascii=False, sort_keys=True, indent=2)
            fh.write("\n")
        paths.append(report_path)
        for k, name in enumerate(mask_stats.concept_names):
            for block_name, grid in mask_stats.layer_grids[k].items():
                pgm_path = os.path.join(
                    out_dir, f"mask_{_slug(name)}_{_slug(block_name)}.pgm"
                )
                _write_pgm(grid, pgm_path)
                paths.append(pgm_path)
        csv_path = os.path.join(out_dir, "saliency.csv")
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["concept"] + list(trace.tokens))
            for k, name in enumerate(trace.concept_names):
                writer.writerow([name] + [repr(x) for x in trace.token_saliency[k]])
        paths.append(csv_path)
        return paths
    except OSError as exc:
        raise DataError(f"cannot write report files: {exc}") from exc
