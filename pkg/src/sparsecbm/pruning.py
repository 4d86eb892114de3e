"""Concept-induced sparsity mining.

Per concept: estimate a block-diagonal dampened empirical Fisher over the
prunable space, rank weights by the closed-form loss-increase score of
second-order (OBS-style) pruning, clear the cheapest mask bits up to the
scheduled sparsity, and fine-tune the surviving weights on the decomposed
objective between steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Split, token_counts
from .diffcore import cross_entropy_batch
from .errors import ConfigError
from .model import (
    MaskSet,
    ModelParams,
    encoder_backward,
    flatten_layer_grads,
    forward_pathway_batch,
)
from .training import TrainConfig, pathway_loss_batch, train


@dataclass
class PruneConfig:
    target_sparsity: float | None = None  # default 1 - 1/K, resolved at use
    steps: int = 4
    finetune_epochs_per_step: int = 1
    block_size: int = 64
    dampening: float = 1e-4
    fisher_samples: int = 128
    group_size: int = 1
    compensation: str = "none"  # or "per_concept_delta"
    fisher_loss: str = "coupled"  # or "concept_only"
    gamma: float = 5.0
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.target_sparsity is not None and not 0.0 <= self.target_sparsity < 1.0:
            raise ConfigError("target sparsity must lie in [0, 1)")
        if self.steps < 1 or self.block_size < 1 or self.group_size < 1:
            raise ConfigError("steps, block_size and group_size must be >= 1")
        if self.dampening <= 0:
            raise ConfigError("dampening must be positive")
        if self.fisher_samples < 1:
            raise ConfigError("fisher_samples must be >= 1")
        if self.compensation not in ("none", "per_concept_delta"):
            raise ConfigError(f"unknown compensation {self.compensation!r}")
        if self.fisher_loss not in ("coupled", "concept_only"):
            raise ConfigError(f"unknown fisher_loss {self.fisher_loss!r}")

    def resolved_sparsity(self, n_concepts: int) -> float:
        if self.target_sparsity is not None:
            return self.target_sparsity
        return 1.0 - 1.0 / n_concepts


class FisherEstimate:
    """Block-diagonal dampened empirical Fisher over the prunable space."""

    def __init__(self, blocks: list, block_size: int, n_prunable: int,
                 concept_index: int, sample_indices=None):
        self.blocks = blocks
        self.block_size = block_size
        self.n_prunable = n_prunable
        self.concept_index = concept_index
        self.sample_indices = sample_indices
        self._inverses: list = [None] * len(blocks)

    def block_range(self, b: int):
        start = b * self.block_size
        return start, min(start + self.block_size, self.n_prunable)

    def block_of(self, flat_index: int) -> int:
        return flat_index // self.block_size

    def inverse(self, b: int) -> np.ndarray:
        if self._inverses[b] is None:
            blk = self.blocks[b]
            # Dampening makes every block symmetric positive definite, so
            # the Cholesky-based inverse cannot fail on valid estimates.
            chol = np.linalg.cholesky(blk)
            ident = np.eye(blk.shape[0])
            self._inverses[b] = np.linalg.solve(chol.T, np.linalg.solve(chol, ident))
        return self._inverses[b]

    def inverse_diag(self) -> np.ndarray:
        out = np.empty(self.n_prunable)
        for b in range(len(self.blocks)):
            start, stop = self.block_range(b)
            out[start:stop] = np.diag(self.inverse(b))
        return out


def _per_example_theta_grads(pooled, task_labels, concept_labels, params,
                             masks: MaskSet, concept: int, coupled: bool) -> np.ndarray:
    """Per-example gradients of the concept-k objective w.r.t. stored theta.

    The objective is CE(concept k through mask k) plus, when ``coupled``,
    the task CE through the full pathway (unweighted). Losses here are
    per-example, not batch means.
    """
    cache = forward_pathway_batch(pooled, params, masks)
    n = pooled.shape[0]
    k_total = params.psi_w.shape[0]
    grads = np.zeros((n, params.n_prunable))
    # Per-example seeds: softmax minus one-hot, no 1/n.
    sig_prime = cache.activations * (1.0 - cache.activations)
    if coupled:
        _, d_task = cross_entropy_batch(cache.task_logits, task_labels)
        d_task = d_task * n
    else:
        d_task = np.zeros_like(cache.task_logits)
    _, d_conc = cross_entropy_batch(cache.concept_logits[:, concept, :], concept_labels[:, concept])
    d_conc = d_conc * n
    d_z_shared = np.zeros_like(cache.z[0]) if cache.shared else None
    for k in range(k_total):
        d_logits_k = (d_task @ params.phi[k]) * sig_prime[:, k, :]
        if k == concept:
            d_logits_k = d_logits_k + d_conc
        d_z_k = d_logits_k @ params.psi_w[k]
        if cache.shared:
            d_z_shared += d_z_k
        else:
            d_ws, _, _ = encoder_backward(cache.enc_caches[k], d_z_k, per_example=True)
            flat = flatten_layer_grads(d_ws, params.theta.block_map, per_example=True)
            grads += flat * masks.bits[k][None, :]
    if cache.shared:
        d_ws, _, _ = encoder_backward(cache.enc_caches[0], d_z_shared, per_example=True)
        flat = flatten_layer_grads(d_ws, params.theta.block_map, per_example=True)
        grads = flat * masks.bits[0][None, :]
    return grads


def sample_indices(dataset_size: int, m: int, seed, step: int, concept: int) -> np.ndarray:
    rng = np.random.default_rng([seed, step, concept])
    replace_draw = m > dataset_size
    return rng.choice(dataset_size, size=m, replace=replace_draw)


def estimate_fisher(dataset: Split, params: ModelParams, masks: MaskSet, concept: int,
                    config: PruneConfig, step: int = 0, indices=None) -> FisherEstimate:
    """Dampened empirical Fisher for one concept's pruning objective.

    F_block = zeta*I + (1/m) * sum_i g_i g_i^T with per-example gradients g_i
    restricted to that block (off-block correlations discarded).
    """
    if indices is None:
        indices = sample_indices(len(dataset), config.fisher_samples, config.seed, step, concept)
    counts, lengths = token_counts(dataset, params.embeddings.shape[0])
    counts = counts[indices]
    lengths = lengths[indices]
    pooled = (counts @ params.embeddings) / lengths[:, None]
    task_labels = dataset.task_labels()[indices]
    concept_labels = dataset.concept_matrix()[indices]
    grads = _per_example_theta_grads(
        pooled, task_labels, concept_labels, params, masks, concept,
        coupled=config.fisher_loss == "coupled",
    )
    if not np.all(np.isfinite(grads)):
        raise ConfigError("non-finite gradients during Fisher estimation")
    m = grads.shape[0]
    n_prunable = params.n_prunable
    blocks = []
    for start in range(0, n_prunable, config.block_size):
        stop = min(start + config.block_size, n_prunable)
        g = grads[:, start:stop]
        blk = (g.T @ g) / m
        blk[np.diag_indices_from(blk)] += config.dampening
        blocks.append(blk)
    return FisherEstimate(
        blocks, config.block_size, n_prunable, concept, sample_indices=indices
    )


# ---------------------------------------------------------------------------
# Closed-form OBS score and compensation
# ---------------------------------------------------------------------------


def _local_indices(q, fisher: FisherEstimate):
    q = np.asarray(sorted(int(i) for i in q), dtype=np.int64)
    if q.size == 0:
        raise ValueError("empty prune group")
    b = fisher.block_of(q[0])
    start, stop = fisher.block_range(b)
    if not ((q >= start) & (q < stop)).all():
        raise ValueError("prune group must lie within a single Fisher block")
    return b, start, q - start


def obs_score(q, theta_values: np.ndarray, fisher: FisherEstimate) -> float:
    """Estimated loss increase for pruning exactly the weights in ``q``.

    rho = 1/2 * theta_q^T (F_inv[q, q])^{-1} theta_q with the block-local
    Fisher inverse; for a singleton this is theta_b^2 / (2 * F_inv[b, b]).
    """
    b, start, local = _local_indices(q, fisher)
    inv = fisher.inverse(b)
    w = inv[np.ix_(local, local)]
    tq = theta_values[local + start]
    return float(0.5 * tq @ np.linalg.solve(w, tq))


def obs_update(q, theta_values: np.ndarray, fisher: FisherEstimate) -> np.ndarray:
    """Optimal compensation: zeroes ``q`` exactly, perturbs only its block.

    Returns a full-length delta vector (zero outside the block).
    """
    b, start, local = _local_indices(q, fisher)
    inv = fisher.inverse(b)
    w = inv[np.ix_(local, local)]
    tq = theta_values[local + start]
    delta = np.zeros_like(theta_values)
    delta[start : start + inv.shape[0]] = -inv[:, local] @ np.linalg.solve(w, tq)
    return delta


def quadratic_loss_increase(delta: np.ndarray, fisher: FisherEstimate) -> float:
    """1/2 * delta^T F delta under the block-diagonal model."""
    total = 0.0
    for b, blk in enumerate(fisher.blocks):
        start, stop = fisher.block_range(b)
        d = delta[start:stop]
        total += 0.5 * d @ blk @ d
    return float(total)


# ---------------------------------------------------------------------------
# Pruning steps
# ---------------------------------------------------------------------------


def _target_count(step_target: float, n_prunable: int) -> int:
    # Guard against float fuzz pushing e.g. 0.9 * L one past the exact value.
    return math.ceil(step_target * n_prunable - 1e-9)


def _select_singletons(rho: np.ndarray, candidates: np.ndarray, need: int) -> np.ndarray:
    order = np.argsort(rho[candidates], kind="stable")
    return candidates[order[:need]]


def _select_groups(theta_values, fisher, candidates, need, group_size):
    """Greedy selection of consecutive same-block groups by rho.

    The last selected group is trimmed by per-singleton rho when it would
    overshoot the exact count.
    """
    groups = []
    by_block: dict = {}
    for idx in candidates:
        by_block.setdefault(fisher.block_of(idx), []).append(idx)
    for b in sorted(by_block):
        members = by_block[b]
        for i in range(0, len(members), group_size):
            g = members[i : i + group_size]
            groups.append((obs_score(g, theta_values, fisher), g))
    groups.sort(key=lambda item: (item[0], item[1][0]))
    chosen: list = []
    for _, g in groups:
        if len(chosen) >= need:
            break
        remaining = need - len(chosen)
        if len(g) <= remaining:
            chosen.extend(g)
        else:
            singles = sorted(g, key=lambda i: obs_score([i], theta_values, fisher))
            chosen.extend(singles[:remaining])
    return np.asarray(sorted(chosen), dtype=np.int64)


def prune_step(params: ModelParams, masks: MaskSet, concept: int, step_target: float,
               config: PruneConfig, fisher: FisherEstimate) -> dict:
    """Prune concept ``concept`` down to ``step_target`` sparsity in place.

    Scores candidates among currently unpruned weights, clears exactly
    ceil(step_target * L) - already_pruned bits (lowest rho first, ties to
    the lowest index). With per-concept compensation enabled, the jointly
    optimal block-local update for all bits cleared in a block is
    accumulated into that concept's delta.
    """
    n_prunable = masks.n_prunable
    bits = masks.bits[concept]
    current_pruned = int(n_prunable - bits.sum())
    target = _target_count(step_target, n_prunable)
    need = target - current_pruned
    info = {
        "concept": concept,
        "step_target": step_target,
        "pruned_before": current_pruned,
        "count_pruned": 0,
        "rho": None,
    }
    if need <= 0:
        info["pruned_after"] = current_pruned
        return info
    candidates = np.flatnonzero(bits == 1)
    if need > candidates.size:
        raise ConfigError(
            f"cannot prune {need} more weights for concept {concept}: "
            f"only {candidates.size} remain"
        )
    deltas_k = None
    theta_eff = params.theta.values
    if config.compensation == "per_concept_delta":
        if masks.deltas is None:
            masks.deltas = np.zeros((masks.n_concepts, masks.n_prunable))
        deltas_k = masks.deltas[concept]
        theta_eff = params.theta.values + deltas_k
    if config.group_size == 1:
        inv_diag = fisher.inverse_diag()
        rho_all = theta_eff**2 / (2.0 * inv_diag)
        chosen = _select_singletons(rho_all, candidates, need)
        rho_chosen = rho_all[chosen]
    else:
        chosen = _select_groups(theta_eff, fisher, candidates, need, config.group_size)
        rho_chosen = np.array([obs_score([i], theta_eff, fisher) for i in chosen])
    if deltas_k is not None:
        for b in np.unique(chosen // config.block_size):
            start, stop = fisher.block_range(int(b))
            sel = chosen[(chosen >= start) & (chosen < stop)]
            local = sel - start
            inv = fisher.inverse(int(b))
            w = inv[np.ix_(local, local)]
            tq = theta_eff[sel]
            deltas_k[start:stop] += -inv[:, local] @ np.linalg.solve(w, tq)
    bits[chosen] = 0
    info["count_pruned"] = int(chosen.size)
    info["pruned_after"] = int(n_prunable - bits.sum())
    info["rho"] = {
        "min": float(rho_chosen.min()),
        "max": float(rho_chosen.max()),
        "mean": float(rho_chosen.mean()),
    }
    return info


@dataclass
class PruneReport:
    entries: list = field(default_factory=list)
    final_sparsity: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"entries": self.entries, "final_sparsity": self.final_sparsity}


def prune_to_sparsity(dataset: Split, params: ModelParams, masks: MaskSet,
                      config: PruneConfig, dev: Split | None = None):
    """Iterative prune + fine-tune schedule to the target per-concept sparsity.

    Linear schedule over ``config.steps``: after step p every concept mask is
    at sparsity s*p/steps (exact integer counts), each step followed by
    fine-tuning all unmasked parameters on the decomposed objective.
    Returns (params, masks, report); inputs are not mutated.
    """
    params = params.copy()
    masks = masks.copy()
    k_total = masks.n_concepts
    s = config.resolved_sparsity(k_total)
    report = PruneReport()
    counts, lengths = token_counts(dataset, params.embeddings.shape[0])
    task_labels = dataset.task_labels()
    concept_labels = dataset.concept_matrix()
    for p in range(1, config.steps + 1):
        step_target = s * p / config.steps
        for k in range(k_total):
            fisher = estimate_fisher(dataset, params, masks, k, config, step=p)
            idx = fisher.sample_indices
            pooled = (counts[idx] @ params.embeddings) / lengths[idx][:, None]
            loss_before, _, _ = pathway_loss_batch(
                pooled, task_labels[idx], concept_labels[idx], params, masks,
                config.gamma, want_grads=False,
            )
            info = prune_step(params, masks, k, step_target, config, fisher)
            loss_after, _, _ = pathway_loss_batch(
                pooled, task_labels[idx], concept_labels[idx], params, masks,
                config.gamma, want_grads=False,
            )
            info.update({"step": p, "loss_before": loss_before, "loss_after": loss_after,
                         "sparsity": float(1.0 - masks.bits[k].mean())})
            report.entries.append(info)
        if config.finetune_epochs_per_step > 0:
            ft_config = TrainConfig(
                strategy="joint",
                gamma=config.gamma,
                lr=config.lr,
                epochs=config.finetune_epochs_per_step,
                batch_size=config.batch_size,
                seed=config.seed + 7919 * p,
            )
            result = train(dataset, ft_config, params, masks, dev=dev)
            params = result.params
    report.final_sparsity = [float(x) for x in masks.sparsity()]
    return params, masks, report
