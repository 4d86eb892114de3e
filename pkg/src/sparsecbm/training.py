"""Training strategies, the joint/decomposed objectives, and Adam.

Four strategies are supported:

* ``vanilla``     task cross-entropy only, through a direct latent->task
                  head that bypasses the bottleneck (baseline row).
* ``independent`` encoder+projector on concept CE; classifier on
                  ground-truth-concept inputs. Predicted activations are
                  used at inference.
* ``sequential``  encoder+projector on concept CE, then classifier on the
                  frozen projector's activations.
* ``joint``       weighted sum of task CE and gamma-scaled concept CEs; the
                  same code path fine-tunes pruned models through the
                  per-concept masked branches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Split, token_counts
from .diffcore import cross_entropy_batch
from .errors import ConfigError, NumericError
from .model import (
    Grads,
    MaskSet,
    ModelParams,
    backward_pathway,
    encode_from_pooled,
    encoder_backward,
    flatten_layer_grads,
    flatten_trainables,
    forward_pathway_batch,
    pooled_embedding,
    trainable_entries,
    write_flat_trainables,
)

STRATEGIES = ("vanilla", "independent", "sequential", "joint")


@dataclass
class TrainConfig:
    strategy: str = "joint"
    gamma: float = 5.0
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    task_term: str = "single"  # or "per_concept": one task CE per branch

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        # lr 0 is allowed as a degenerate no-op (used to test invariance).
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("invalid epochs/batch_size")
        if self.task_term not in ("single", "per_concept"):
            raise ConfigError(f"unknown task_term {self.task_term!r}")


@dataclass
class OptimizerState:
    """Adam accumulators aligned with one flat trainable vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(state: OptimizerState, grads: np.ndarray, trainables: np.ndarray, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; returns the updated parameter vector."""
    if grads.shape != trainables.shape or grads.shape != state.m.shape:
        raise ValueError("optimizer state, gradients and parameters must align")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return trainables - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


def pathway_loss_batch(pooled, task_labels, concept_labels, params, masks, gamma,
                       task_term: str = "single", want_grads: bool = True):
    """Mean decomposed joint loss over a batch, with optional gradients.

    Returns (total, parts, grads_or_None). ``parts`` carries the unweighted
    task CE and per-concept CEs; total = task + gamma * sum(concepts).
    """
    cache = forward_pathway_batch(pooled, params, masks)
    k_total = params.psi_w.shape[0]
    concept_ce = np.zeros(k_total)
    d_concept = np.zeros_like(cache.concept_logits)
    for k in range(k_total):
        ce_k, d_k = cross_entropy_batch(cache.concept_logits[:, k, :], concept_labels[:, k])
        concept_ce[k] = ce_k
        d_concept[:, k, :] = gamma * d_k
    d_contrib = None
    if task_term == "per_concept":
        task_ce = 0.0
        d_contrib = np.zeros_like(cache.contributions)
        for k in range(k_total):
            ce_k, d_k = cross_entropy_batch(cache.contributions[:, k, :], task_labels)
            task_ce += ce_k
            d_contrib[:, k, :] = d_k
        d_task = np.zeros_like(cache.task_logits)
    else:
        task_ce, d_task = cross_entropy_batch(cache.task_logits, task_labels)
    total = task_ce + gamma * concept_ce.sum()
    if not np.isfinite(total):
        raise NumericError("non-finite loss", block="pathway")
    parts = {"task_ce": float(task_ce), "concept_ce": concept_ce.tolist()}
    if not want_grads:
        return float(total), parts, None
    grads = backward_pathway(cache, params, masks, d_task, d_concept, d_contrib)
    return float(total), parts, grads


def joint_loss(example, params: ModelParams, masks: MaskSet | None, gamma: float) -> float:
    """Dense-style objective: one shared encoder pass feeds every head.

    Only defined when all masks are bit-identical (the dense objective has a
    single encoder); pass all-ones masks or None for plain dense training.
    """
    if masks is not None and not masks.all_same():
        raise ValueError("joint_loss requires bit-identical masks; use decomposed_joint_loss")
    pooled = pooled_embedding(example, params)[None, :]
    total, _, _ = pathway_loss_batch(
        pooled,
        np.array([example.task_label]),
        example.concept_labels[None, :],
        params,
        masks,
        gamma,
        want_grads=False,
    )
    return total


def decomposed_joint_loss(example, params: ModelParams, masks: MaskSet | None, gamma: float):
    """Per-concept factorized objective; returns (total, parts).

    Each concept's CE comes from its own masked encoder pass, the task CE is
    computed once on the summed pathway output. With bit-identical masks this
    equals :func:`joint_loss` exactly.
    """
    pooled = pooled_embedding(example, params)[None, :]
    total, parts, _ = pathway_loss_batch(
        pooled,
        np.array([example.task_label]),
        example.concept_labels[None, :],
        params,
        masks,
        gamma,
        want_grads=False,
    )
    return total, parts


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    telemetry: list = field(default_factory=list)


def _pooled_rows(counts, lengths, idx, embeddings):
    rows = counts[idx]
    return (rows @ embeddings) / lengths[idx][:, None], rows


def _emb_grad(rows, lengths_idx, d_pooled):
    return (rows / lengths_idx[:, None]).T @ d_pooled


def _grads_flat(params: ModelParams, grads: Grads, d_emb, include_direct: bool = False) -> np.ndarray:
    by_name = {
        "embeddings": d_emb,
        "theta": grads.theta,
        "psi.weight": grads.psi_w,
        "psi.bias": grads.psi_b,
        "phi.weight": grads.phi,
    }
    for i, g in enumerate(grads.enc_biases):
        by_name[f"enc.b{i + 1}"] = g
    if include_direct:
        by_name["direct.weight"] = grads.direct_w
        by_name["direct.bias"] = grads.direct_b
    return np.concatenate(
        [np.asarray(by_name[name]).ravel() for name, _ in trainable_entries(params, include_direct)]
    )


def _epoch_batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _split_accuracy(counts, lengths, task_labels, concept_labels, params, masks):
    pooled = (counts @ params.embeddings) / lengths[:, None]
    cache = forward_pathway_batch(pooled, params, masks)
    task_pred = cache.task_logits.argmax(axis=1)
    concept_pred = cache.concept_logits.argmax(axis=2)
    return (
        float((task_pred == task_labels).mean()),
        float((concept_pred == concept_labels).mean()),
    )


def predict_direct_batch(pooled, params: ModelParams):
    if params.direct_w is None:
        raise ValueError("model has no direct head; train with strategy 'vanilla'")
    z, _ = encode_from_pooled(pooled, params, None)
    return (z @ params.direct_w.T + params.direct_b).argmax(axis=1)


_PHASE_IDS = {"joint": 0, "vanilla": 1, "concepts": 2, "classifier": 3}


def _run_pathway_phase(phase, counts, lengths, task_labels, concept_labels, params,
                       masks, config, telemetry, dev_stats, concept_only=False):
    """Epochs of Adam on the pathway objective (or the concept part alone)."""
    n = counts.shape[0]
    opt = OptimizerState.zeros(flatten_trainables(params).size)
    gamma = 1.0 if concept_only else config.gamma
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, _PHASE_IDS[phase], epoch])
        epoch_loss = 0.0
        n_batches = 0
        for batch_i, idx in enumerate(_epoch_batches(n, config.batch_size, rng)):
            pooled, rows = _pooled_rows(counts, lengths, idx, params.embeddings)
            try:
                if concept_only:
                    total, _, grads = _concept_only_grads(
                        pooled, concept_labels[idx], params, masks
                    )
                else:
                    total, _, grads = pathway_loss_batch(
                        pooled,
                        task_labels[idx],
                        concept_labels[idx],
                        params,
                        masks,
                        gamma,
                        task_term=config.task_term,
                    )
            except NumericError as exc:
                raise NumericError(
                    f"training aborted at epoch {epoch} batch {batch_i}: {exc}"
                ) from exc
            d_emb = _emb_grad(rows, lengths[idx], grads.emb_pooled)
            flat = _grads_flat(params, grads, d_emb)
            new_vec = adam_step(opt, flat, flatten_trainables(params), config.lr)
            write_flat_trainables(params, new_vec)
            epoch_loss += total
            n_batches += 1
        record = {"phase": phase, "epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1)}
        t_acc, c_acc = _split_accuracy(counts, lengths, task_labels, concept_labels, params, masks)
        record["train_task_acc"] = t_acc
        record["train_concept_acc"] = c_acc
        if dev_stats is not None:
            d_counts, d_lengths, d_task, d_concepts = dev_stats
            pooled_dev = (d_counts @ params.embeddings) / d_lengths[:, None]
            dev_loss, _, _ = pathway_loss_batch(
                pooled_dev, d_task, d_concepts, params, masks, gamma,
                task_term=config.task_term, want_grads=False,
            )
            record["dev_loss"] = dev_loss
            t_acc, c_acc = _split_accuracy(d_counts, d_lengths, d_task, d_concepts, params, masks)
            record["dev_task_acc"] = t_acc
            record["dev_concept_acc"] = c_acc
        telemetry.append(record)


def _concept_only_grads(pooled, concept_labels, params, masks):
    cache = forward_pathway_batch(pooled, params, masks)
    k_total = params.psi_w.shape[0]
    d_concept = np.zeros_like(cache.concept_logits)
    total = 0.0
    for k in range(k_total):
        ce_k, d_k = cross_entropy_batch(cache.concept_logits[:, k, :], concept_labels[:, k])
        total += ce_k
        d_concept[:, k, :] = d_k
    grads = backward_pathway(cache, params, masks, np.zeros_like(cache.task_logits), d_concept)
    return float(total), {}, grads


def _train_classifier_phase(phase, activations, task_labels, params, config, telemetry):
    """Adam on phi only, with fixed (n, K, V) activation inputs."""
    n = activations.shape[0]
    opt = OptimizerState.zeros(params.phi.size)
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, _PHASE_IDS[phase], epoch])
        epoch_loss = 0.0
        n_batches = 0
        for idx in _epoch_batches(n, config.batch_size, rng):
            acts = activations[idx]
            logits = np.einsum("nkv,kcv->nc", acts, params.phi)
            ce, d_task = cross_entropy_batch(logits, task_labels[idx])
            d_phi = np.einsum("nc,nkv->kcv", d_task, acts)
            new_phi = adam_step(opt, d_phi.ravel(), params.phi.ravel(), config.lr)
            params.phi[...] = new_phi.reshape(params.phi.shape)
            epoch_loss += ce
            n_batches += 1
        telemetry.append({"phase": phase, "epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1)})


def _train_vanilla(counts, lengths, task_labels, params, config, telemetry):
    n = counts.shape[0]
    if params.direct_w is None:
        c = params.phi.shape[1]
        params.direct_w = np.zeros((c, params.psi_w.shape[2]))
        params.direct_b = np.zeros(c)
    opt = OptimizerState.zeros(flatten_trainables(params, include_direct=True).size)
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, _PHASE_IDS["vanilla"], epoch])
        epoch_loss = 0.0
        n_batches = 0
        for idx in _epoch_batches(n, config.batch_size, rng):
            pooled, rows = _pooled_rows(counts, lengths, idx, params.embeddings)
            z, enc_cache = encode_from_pooled(pooled, params, None)
            logits = z @ params.direct_w.T + params.direct_b
            ce, d_logits = cross_entropy_batch(logits, task_labels[idx])
            if not np.isfinite(ce):
                raise NumericError(f"training aborted at epoch {epoch}", block="direct")
            d_w = d_logits.T @ z
            d_b = d_logits.sum(axis=0)
            d_z = d_logits @ params.direct_w
            d_ws, d_bs, d_pooled = encoder_backward(enc_cache, d_z)
            grads = Grads(
                emb_pooled=d_pooled,
                theta=flatten_layer_grads(d_ws, params.theta.block_map),
                enc_biases=list(d_bs),
                psi_w=np.zeros_like(params.psi_w),
                psi_b=np.zeros_like(params.psi_b),
                phi=np.zeros_like(params.phi),
                direct_w=d_w,
                direct_b=d_b,
            )
            d_emb = _emb_grad(rows, lengths[idx], d_pooled)
            flat = _grads_flat(params, grads, d_emb, include_direct=True)
            new_vec = adam_step(opt, flat, flatten_trainables(params, include_direct=True), config.lr)
            write_flat_trainables(params, new_vec, include_direct=True)
            epoch_loss += ce
            n_batches += 1
        pooled_all = (counts @ params.embeddings) / lengths[:, None]
        acc = float((predict_direct_batch(pooled_all, params) == task_labels).mean())
        telemetry.append(
            {"phase": "vanilla", "epoch": epoch,
             "train_loss": epoch_loss / max(n_batches, 1), "train_task_acc": acc}
        )


def train(dataset: Split, config: TrainConfig, params: ModelParams,
          masks: MaskSet | None, dev: Split | None = None, log_path=None) -> TrainResult:
    """Run one training strategy; returns new parameters plus telemetry.

    The input parameters are not mutated. Mini-batch order is a
    seed-deterministic shuffle; gradients reach masked encoder positions
    only where the relevant mask bit is 1.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    params = params.copy()
    vocab_size = params.embeddings.shape[0]
    counts, lengths = token_counts(dataset, vocab_size)
    task_labels = dataset.task_labels()
    concept_labels = dataset.concept_matrix()
    dev_stats = None
    if dev is not None:
        d_counts, d_lengths = token_counts(dev, vocab_size)
        dev_stats = (d_counts, d_lengths, dev.task_labels(), dev.concept_matrix())
    telemetry: list = []
    if config.strategy == "joint":
        _run_pathway_phase(
            "joint", counts, lengths, task_labels, concept_labels,
            params, masks, config, telemetry, dev_stats,
        )
    elif config.strategy == "vanilla":
        _train_vanilla(counts, lengths, task_labels, params, config, telemetry)
    elif config.strategy in ("independent", "sequential"):
        _run_pathway_phase(
            "concepts", counts, lengths, task_labels, concept_labels,
            params, masks, config, telemetry, None, concept_only=True,
        )
        if config.strategy == "independent":
            k_total = params.psi_w.shape[0]
            v = params.psi_w.shape[1]
            acts = np.zeros((len(dataset), k_total, v))
            rows_idx = np.arange(len(dataset))
            for k in range(k_total):
                acts[rows_idx, k, concept_labels[:, k]] = 1.0
        else:
            pooled_all = (counts @ params.embeddings) / lengths[:, None]
            cache = forward_pathway_batch(pooled_all, params, masks)
            acts = cache.activations
        _train_classifier_phase("classifier", acts, task_labels, params, config, telemetry)
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for record in telemetry:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    return TrainResult(params=params, telemetry=telemetry)
