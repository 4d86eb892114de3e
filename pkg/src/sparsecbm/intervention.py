"""Inference-time intervention.

Two modes. Oracle intervention replaces predicted concept activations with
one-hot corrections and reclassifies; it never touches the backbone, so the
same input keeps failing. Sparsity-based intervention edits the mispredicted
concept's mask instead: drop the least salient active weights, grow the most
salient pruned ones (equal counts, sparsity preserved), with saliency
|gradient x weight| taken from the concept's loss through its masked branch.
All ordinary parameters stay frozen by contract.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Example, Split, token_counts
from .diffcore import softmax
from .errors import ConfigError
from .model import (
    MaskSet,
    ModelParams,
    encode_from_pooled,
    encoder_backward,
    flatten_layer_grads,
    forward_pathway_batch,
    pooled_embedding,
    predict,
    predict_batch,
)


@dataclass
class InterventionConfig:
    r: float = 0.01
    mode: str = "sparsity"
    rounds: int = 1

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ConfigError("r must lie in [0, 1]")
        if self.mode not in ("oracle", "sparsity"):
            raise ConfigError(f"unknown intervention mode {self.mode!r}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")


def oracle_intervene(activations: np.ndarray, corrections: dict, params: ModelParams):
    """Replace corrected concepts' activation rows with one-hots, reclassify.

    ``activations`` is the (K, V) post-sigmoid matrix from a completed
    forward pass; ``corrections`` maps concept index -> corrected class.
    Returns (task_class, task_logits, new_activations). Idempotent for a
    fixed correction set.
    """
    acts = np.array(activations, dtype=np.float64, copy=True)
    k_total, v_total = acts.shape
    for k, cls in corrections.items():
        if not 0 <= k < k_total or not 0 <= cls < v_total:
            raise ConfigError(f"correction ({k}, {cls}) out of range")
        acts[k] = 0.0
        acts[k, cls] = 1.0
    task_logits = np.einsum("kv,kcv->c", acts, params.phi)
    return int(task_logits.argmax()), task_logits, acts


def saliency_scores(example: Example, concept: int, params: ModelParams, masks: MaskSet) -> np.ndarray:
    """Per-index saliency over the full prunable space for one concept.

    S_i = |g_i * theta_i| where g is the gradient of the concept's
    cross-entropy (against the example's concept label) with respect to the
    branch's effective weights, taken along the pre-mask path so pruned
    positions score as if their weight were present.
    """
    pooled = pooled_embedding(example, params)[None, :]
    delta = None if masks.deltas is None else masks.deltas[concept]
    z, cache = encode_from_pooled(pooled, params, masks.bits[concept], delta)
    logits = z @ params.psi_w[concept].T + params.psi_b[concept]
    d_logits = softmax(logits)
    d_logits[0, example.concept_labels[concept]] -= 1.0
    d_z = d_logits @ params.psi_w[concept]
    d_ws, _, _ = encoder_backward(cache, d_z)
    raw = flatten_layer_grads(d_ws, params.theta.block_map)
    theta_eff = params.theta.values if delta is None else params.theta.values + delta
    return np.abs(raw * theta_eff)


def drop_grow(mask_bits: np.ndarray, scores: np.ndarray, r: float):
    """One drop/grow round on a single mask; popcount is invariant.

    Clears the round(r*L) active bits with the lowest scores and sets the
    round(r*L) pruned bits with the highest scores (ties to the lowest
    index). When either side has fewer candidates, both counts clamp to the
    available minimum. Returns (new_bits, info).
    """
    n_prunable = mask_bits.size
    want = int(round(r * n_prunable))
    active = np.flatnonzero(mask_bits == 1)
    pruned = np.flatnonzero(mask_bits == 0)
    count = min(want, active.size, pruned.size)
    info = {"dropped": count, "grown": count, "clamped": count < want}
    if count == 0:
        return mask_bits.copy(), info
    drop_order = np.argsort(scores[active], kind="stable")
    grow_order = np.argsort(-scores[pruned], kind="stable")
    new_bits = mask_bits.copy()
    new_bits[active[drop_order[:count]]] = 0
    new_bits[pruned[grow_order[:count]]] = 1
    return new_bits, info


def sparsity_intervene(example: Example, wrong_concepts, params: ModelParams,
                       masks: MaskSet, config: InterventionConfig,
                       example_id=None) -> list:
    """Drop/grow the masks of mispredicted concepts; parameters stay frozen.

    Edits ``masks`` in place (the stream protocol persists edits across
    examples). For each wrong concept the round loop stops early once the
    concept prediction flips to the example's label. Returns one event per
    concept.
    """
    digest_before = params.frozen_digest()
    pre_task, pre_concepts = predict(example, params, masks)
    events = []
    for k in wrong_concepts:
        dropped = grown = rounds_used = 0
        clamped = False
        post_k = int(pre_concepts[k])
        for _ in range(config.rounds):
            scores = saliency_scores(example, k, params, masks)
            new_bits, info = drop_grow(masks.bits[k], scores, config.r)
            masks.bits[k] = new_bits
            dropped += info["dropped"]
            grown += info["grown"]
            clamped = clamped or info["clamped"]
            rounds_used += 1
            _, concepts_now = predict(example, params, masks)
            post_k = int(concepts_now[k])
            if post_k == example.concept_labels[k]:
                break
        events.append(
            {
                "example_id": example_id,
                "concept": int(k),
                "pre_concept": int(pre_concepts[k]),
                "post_concept": post_k,
                "dropped": dropped,
                "grown": grown,
                "clamped": clamped,
                "rounds_used": rounds_used,
            }
        )
    post_task, _ = predict(example, params, masks)
    for ev in events:
        ev["pre_task"] = int(pre_task)
        ev["post_task"] = int(post_task)
    if params.frozen_digest() != digest_before:
        raise RuntimeError("intervention modified frozen parameters")
    return events


def _accuracy_pair(task_pred, concept_pred, task_gold, concept_gold):
    task_acc = float((np.asarray(task_pred) == task_gold).mean())
    concept_acc = float(
        np.mean([(np.asarray(concept_pred)[:, k] == concept_gold[:, k]).mean()
                 for k in range(concept_gold.shape[1])])
    )
    return {"task_accuracy": task_acc, "concept_accuracy": concept_acc}


def evaluate_intervention(split: Split, params: ModelParams, masks: MaskSet,
                          r_grid, config: InterventionConfig) -> dict:
    """NI/SI comparison over a labeled split, one stream per r value.

    NI scores the pristine model. In sparsity mode each stream detects
    mispredicted concepts with the gold labels, intervenes, and scores the
    post-intervention predictions; mask edits persist across the stream.
    The SI numbers are reported both in-stream and as a replay of the final
    masks over the split. Oracle mode replaces activations instead and
    leaves masks untouched.
    """
    task_gold = split.task_labels()
    concept_gold = split.concept_matrix()
    counts, lengths = token_counts(split, params.embeddings.shape[0])
    pooled_all = (counts @ params.embeddings) / lengths[:, None]
    ni_task, ni_concepts = predict_batch(pooled_all, params, masks)
    ni = _accuracy_pair(ni_task, ni_concepts, task_gold, concept_gold)
    runs = []
    for r in r_grid:
        run_cfg = replace(config, r=float(r))
        masks_r = masks.copy()
        stream_task = np.empty(len(split), dtype=np.int64)
        stream_concepts = np.empty_like(concept_gold)
        events = []
        n_events = 0
        for i, ex in enumerate(split.examples):
            task_pred, concept_pred = predict(ex, params, masks_r)
            wrong = [k for k in range(concept_gold.shape[1])
                     if concept_pred[k] != ex.concept_labels[k]]
            if wrong and run_cfg.mode == "sparsity" and run_cfg.r > 0:
                evs = sparsity_intervene(ex, wrong, params, masks_r, run_cfg, example_id=i)
                events.extend(evs)
                n_events += len(evs)
                task_pred, concept_pred = predict(ex, params, masks_r)
            elif wrong and run_cfg.mode == "oracle":
                cache = forward_pathway_batch(
                    pooled_embedding(ex, params)[None, :], params, masks_r
                )
                corrections = {k: int(ex.concept_labels[k]) for k in wrong}
                task_pred, _, _ = oracle_intervene(cache.activations[0], corrections, params)
                concept_pred = np.array(
                    [corrections.get(k, int(concept_pred[k]))
                     for k in range(concept_gold.shape[1])]
                )
                n_events += len(wrong)
            stream_task[i] = task_pred
            stream_concepts[i] = concept_pred
        si_stream = _accuracy_pair(stream_task, stream_concepts, task_gold, concept_gold)
        replay_task, replay_concepts = predict_batch(pooled_all, params, masks_r)
        si_replay = _accuracy_pair(replay_task, replay_concepts, task_gold, concept_gold)
        modified = (masks_r.bits != masks.bits).any(axis=0)
        runs.append(
            {
                "r": float(r),
                "si_stream": si_stream,
                "si_replay": si_replay,
                "modified_fraction": float(modified.mean()),
                "events": n_events,
                "event_log": events,
            }
        )
    return {"ni": ni, "runs": runs}
