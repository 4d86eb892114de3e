"""The bottleneck classifier: encoder, projector, classifier heads, masks.

Architecture (fixed): embedding lookup -> mean pooling over token positions
-> ReLU MLP encoder -> per-concept linear projector with sigmoid activation
-> per-concept linear classifier whose outputs sum into the task logits.

Only the encoder MLP weight matrices are prunable; their flat concatenation
is the index space that every concept mask and every checkpointed mask
bitset refers to. Biases and the embedding table are not prunable.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .data import PAD_ID, DatasetSchema, Example
from .diffcore import Block, GradRecord, ParamVector, log_softmax, sigmoid, softmax
from .errors import DataError, NumericError

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    emb_dim: int = 32
    hidden_dims: tuple = (64, 64)
    enc_out: int = 64
    n_concepts: int = 4
    n_concept_classes: int = 3
    n_task_classes: int = 5
    vocab_size: int = 2
    seed: int = 0

    def __post_init__(self):
        dims = [self.emb_dim, *self.hidden_dims, self.enc_out]
        if any(d < 1 for d in dims):
            raise ValueError("all layer dimensions must be >= 1")
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)

    def to_dict(self) -> dict:
        return {
            "emb_dim": self.emb_dim,
            "hidden_dims": list(self.hidden_dims),
            "enc_out": self.enc_out,
            "n_concepts": self.n_concepts,
            "n_concept_classes": self.n_concept_classes,
            "n_task_classes": self.n_task_classes,
            "vocab_size": self.vocab_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            emb_dim=int(d["emb_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            enc_out=int(d["enc_out"]),
            n_concepts=int(d["n_concepts"]),
            n_concept_classes=int(d["n_concept_classes"]),
            n_task_classes=int(d["n_task_classes"]),
            vocab_size=int(d["vocab_size"]),
            seed=int(d["seed"]),
        )


@dataclass
class ModelParams:
    embeddings: np.ndarray           # (vocab, emb_dim), not prunable
    theta: ParamVector               # encoder MLP weights, the prunable space
    enc_biases: list                 # per MLP layer, not prunable
    psi_w: np.ndarray                # (K, V, E) projector weights
    psi_b: np.ndarray                # (K, V)
    phi: np.ndarray                  # (K, C, V) classifier blocks, no bias
    direct_w: np.ndarray | None = None  # (C, E) head for plain fine-tuning
    direct_b: np.ndarray | None = None  # (C,)

    @property
    def n_prunable(self) -> int:
        return len(self.theta)

    def copy(self) -> "ModelParams":
        return ModelParams(
            embeddings=self.embeddings.copy(),
            theta=self.theta.copy(),
            enc_biases=[b.copy() for b in self.enc_biases],
            psi_w=self.psi_w.copy(),
            psi_b=self.psi_b.copy(),
            phi=self.phi.copy(),
            direct_w=None if self.direct_w is None else self.direct_w.copy(),
            direct_b=None if self.direct_b is None else self.direct_b.copy(),
        )

    def frozen_digest(self) -> bytes:
        """Hash of everything the intervention contract freezes."""
        import hashlib

        h = hashlib.sha256()
        for arr in (self.embeddings, self.theta.values, *self.enc_biases,
                    self.psi_w, self.psi_b, self.phi):
            h.update(arr.tobytes())
        return h.digest()


class MaskSet:
    """K binary masks over the prunable index space (1 = kept, 0 = pruned)."""

    def __init__(self, bits: np.ndarray, deltas: np.ndarray | None = None):
        bits = np.ascontiguousarray(bits, dtype=np.uint8)
        if bits.ndim != 2:
            raise ValueError("mask bits must be a (K, L) array")
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("mask bits must be 0 or 1")
        self.bits = bits
        # Optional per-concept pruning compensation, applied only in that
        # concept's forward pass. Runtime-only: not persisted in checkpoints.
        self.deltas = deltas

    @classmethod
    def all_ones(cls, n_concepts: int, n_prunable: int) -> "MaskSet":
        return cls(np.ones((n_concepts, n_prunable), dtype=np.uint8))

    @property
    def n_concepts(self) -> int:
        return self.bits.shape[0]

    @property
    def n_prunable(self) -> int:
        return self.bits.shape[1]

    def sparsity(self) -> np.ndarray:
        """Per-concept fraction of pruned (zero) positions."""
        return 1.0 - self.bits.mean(axis=1)

    def popcounts(self) -> np.ndarray:
        return self.bits.sum(axis=1).astype(np.int64)

    def all_same(self) -> bool:
        return bool((self.bits == self.bits[0]).all()) and self.deltas is None

    def copy(self) -> "MaskSet":
        return MaskSet(self.bits.copy(), None if self.deltas is None else self.deltas.copy())


@dataclass
class ConceptActivations:
    logits: np.ndarray        # (K, V) pre-sigmoid projector outputs
    activations: np.ndarray   # (K, V) = sigmoid(logits)


def init_params(config: ModelConfig) -> ModelParams:
    """He-initialized encoder, small-normal embeddings, zero classifier."""
    rng = np.random.default_rng(config.seed)
    emb = rng.normal(0.0, 0.5, size=(config.vocab_size, config.emb_dim))
    dims = [config.emb_dim, *config.hidden_dims, config.enc_out]
    blocks = []
    chunks = []
    offset = 0
    for i in range(len(dims) - 1):
        rows, cols = dims[i + 1], dims[i]
        blocks.append(Block(f"enc.w{i + 1}", offset, rows, cols))
        offset += rows * cols
        chunks.append(rng.normal(0.0, np.sqrt(2.0 / cols), size=rows * cols))
    theta = ParamVector(np.concatenate(chunks), blocks)
    # Small random biases keep pre-activations off the ReLU kink even when a
    # mask zeroes an entire row (exact-zero pre-activations break
    # finite-difference verification).
    enc_biases = [rng.normal(0.0, 0.01, size=d) for d in dims[1:]]
    psi_w = rng.normal(
        0.0,
        np.sqrt(1.0 / config.enc_out),
        size=(config.n_concepts, config.n_concept_classes, config.enc_out),
    )
    psi_b = np.zeros((config.n_concepts, config.n_concept_classes))
    phi = np.zeros((config.n_concepts, config.n_task_classes, config.n_concept_classes))
    return ModelParams(
        embeddings=emb,
        theta=theta,
        enc_biases=enc_biases,
        psi_w=psi_w,
        psi_b=psi_b,
        phi=phi,
    )


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def pooled_embedding(example: Example, params: ModelParams) -> np.ndarray:
    """Mean of token embeddings; the PAD embedding for empty sequences."""
    if len(example.token_ids) == 0:
        return params.embeddings[PAD_ID].copy()
    return params.embeddings[example.token_ids].mean(axis=0)


def pooled_batch(examples, params: ModelParams) -> np.ndarray:
    return np.stack([pooled_embedding(ex, params) for ex in examples])


# ---------------------------------------------------------------------------
# Encoder forward/backward
# ---------------------------------------------------------------------------


@dataclass
class EncoderCache:
    acts: list     # acts[0] = pooled input, acts[i+1] = output of layer i
    pres: list     # pre-activations per layer
    weffs: list    # effective (masked) weight matrices per layer


def effective_weights(theta: ParamVector, mask_bits=None, delta=None) -> list:
    """Per-layer weight matrices with the mask (and optional compensation)."""
    out = []
    values = theta.values
    if delta is not None:
        values = values + delta
    for blk in theta.block_map:
        w = values[blk.offset : blk.stop].reshape(blk.rows, blk.cols)
        if mask_bits is not None:
            w = w * mask_bits[blk.offset : blk.stop].reshape(blk.rows, blk.cols)
        out.append(w)
    return out


def encode_from_pooled(pooled: np.ndarray, params: ModelParams, mask_bits=None, delta=None):
    """Run the masked MLP on pooled inputs of shape (n, emb_dim)."""
    weffs = effective_weights(params.theta, mask_bits, delta)
    a = pooled
    acts = [a]
    pres = []
    last = len(weffs) - 1
    for i, (w, b) in enumerate(zip(weffs, params.enc_biases)):
        pre = a @ w.T + b
        pres.append(pre)
        a = np.maximum(pre, 0.0) if i < last else pre
        acts.append(a)
    return a, EncoderCache(acts=acts, pres=pres, weffs=weffs)


def encode(example: Example, params: ModelParams, mask_bits=None) -> np.ndarray:
    """Latent vector for one example under one mask (all-ones when None)."""
    if mask_bits is not None and len(mask_bits) != params.n_prunable:
        raise ValueError("mask length does not match the prunable space")
    pooled = pooled_embedding(example, params)[None, :]
    z, _ = encode_from_pooled(pooled, params, mask_bits)
    return z[0]


def encoder_backward(cache: EncoderCache, d_z: np.ndarray, per_example: bool = False):
    """Reverse pass through the MLP.

    Returns (d_weights, d_biases, d_pooled). ``d_weights`` holds gradients
    with respect to the *effective* weights (no mask applied), which is the
    pre-mask gradient needed for grow saliency; multiply by the mask bits to
    get gradients with respect to the stored parameters.
    """
    n_layers = len(cache.weffs)
    d_ws = [None] * n_layers
    d_bs = [None] * n_layers
    d = d_z
    for i in reversed(range(n_layers)):
        d_pre = d if i == n_layers - 1 else d * (cache.pres[i] > 0)
        if per_example:
            d_ws[i] = np.einsum("no,ni->noi", d_pre, cache.acts[i])
        else:
            d_ws[i] = d_pre.T @ cache.acts[i]
        d_bs[i] = d_pre.sum(axis=0)
        d = d_pre @ cache.weffs[i]
    return d_ws, d_bs, d


def flatten_layer_grads(d_ws, block_map, per_example: bool = False) -> np.ndarray:
    if per_example:
        n = d_ws[0].shape[0]
        return np.concatenate([g.reshape(n, -1) for g in d_ws], axis=1)
    return np.concatenate([g.ravel() for g in d_ws])


# ---------------------------------------------------------------------------
# Decision pathway forward/backward
# ---------------------------------------------------------------------------


@dataclass
class PathwayCache:
    shared: bool
    enc_caches: list            # one cache if shared, else one per concept
    z: list                     # per-concept latent (n, E); aliases if shared
    concept_logits: np.ndarray  # (n, K, V)
    activations: np.ndarray     # (n, K, V)
    contributions: np.ndarray   # (n, K, C)
    task_logits: np.ndarray     # (n, C)


def forward_pathway_batch(pooled: np.ndarray, params: ModelParams, masks: MaskSet | None) -> PathwayCache:
    """Evaluate the masked decision pathway on pooled inputs (n, emb_dim).

    With bit-identical masks (or ``masks=None``) the encoder runs once and
    the latent is shared across concepts.
    """
    n = pooled.shape[0]
    k_total = params.psi_w.shape[0]
    if masks is not None and masks.n_concepts != k_total:
        raise ValueError("mask count does not match the number of concepts")
    shared = masks is None or masks.all_same()
    enc_caches = []
    zs = []
    if shared:
        bits = None if masks is None else masks.bits[0]
        z, cache = encode_from_pooled(pooled, params, bits)
        enc_caches.append(cache)
        zs = [z] * k_total
    else:
        deltas = masks.deltas
        for k in range(k_total):
            delta = None if deltas is None else deltas[k]
            z, cache = encode_from_pooled(pooled, params, masks.bits[k], delta)
            enc_caches.append(cache)
            zs.append(z)
    concept_logits = np.empty((n, k_total, params.psi_w.shape[1]))
    for k in range(k_total):
        concept_logits[:, k, :] = zs[k] @ params.psi_w[k].T + params.psi_b[k]
    activations = sigmoid(concept_logits)
    contributions = np.einsum("nkv,kcv->nkc", activations, params.phi)
    task_logits = contributions.sum(axis=1)
    if not np.all(np.isfinite(task_logits)):
        raise NumericError("non-finite task logits in forward pass", block="pathway")
    return PathwayCache(
        shared=shared,
        enc_caches=enc_caches,
        z=zs,
        concept_logits=concept_logits,
        activations=activations,
        contributions=contributions,
        task_logits=task_logits,
    )


def forward_pathway(example: Example, params: ModelParams, masks: MaskSet | None):
    """Single-example pathway: (task logits, ConceptActivations, contributions)."""
    pooled = pooled_embedding(example, params)[None, :]
    cache = forward_pathway_batch(pooled, params, masks)
    acts = ConceptActivations(
        logits=cache.concept_logits[0], activations=cache.activations[0]
    )
    return cache.task_logits[0], acts, cache.contributions[0]


@dataclass
class Grads:
    """Gradient arrays mirroring the trainable parameters."""

    emb_pooled: np.ndarray      # (n, emb_dim) gradient w.r.t. pooled inputs
    theta: np.ndarray           # (L,) masked gradient w.r.t. stored theta
    enc_biases: list
    psi_w: np.ndarray
    psi_b: np.ndarray
    phi: np.ndarray
    direct_w: np.ndarray | None = None
    direct_b: np.ndarray | None = None


def backward_pathway(
    cache: PathwayCache,
    params: ModelParams,
    masks: MaskSet | None,
    d_task: np.ndarray,
    d_concept_logits: np.ndarray | None,
    d_contrib: np.ndarray | None = None,
) -> Grads:
    """Reverse-mode pass through the decision pathway.

    ``d_task`` is the gradient seed on the task logits (n, C) and
    ``d_concept_logits`` an optional extra seed applied directly to the
    pre-sigmoid concept logits (n, K, V), which is where the concept
    cross-entropy attaches. ``d_contrib`` (n, K, C), when given, seeds each
    branch's contribution vector separately (per-branch task terms) instead
    of broadcasting ``d_task``.
    """
    k_total = params.psi_w.shape[0]
    n = d_task.shape[0]
    theta_grad = np.zeros(params.n_prunable)
    bias_grads = [np.zeros_like(b) for b in params.enc_biases]
    psi_w_grad = np.zeros_like(params.psi_w)
    psi_b_grad = np.zeros_like(params.psi_b)
    phi_grad = np.zeros_like(params.phi)
    d_pooled = np.zeros_like(cache.enc_caches[0].acts[0])
    d_z_shared = np.zeros_like(cache.z[0]) if cache.shared else None
    sig_prime = cache.activations * (1.0 - cache.activations)
    for k in range(k_total):
        d_c_k = d_task if d_contrib is None else d_contrib[:, k, :]
        phi_grad[k] = np.einsum("nc,nv->cv", d_c_k, cache.activations[:, k, :])
        d_act_k = d_c_k @ params.phi[k]
        d_logits_k = d_act_k * sig_prime[:, k, :]
        if d_concept_logits is not None:
            d_logits_k = d_logits_k + d_concept_logits[:, k, :]
        psi_w_grad[k] = d_logits_k.T @ cache.z[k]
        psi_b_grad[k] = d_logits_k.sum(axis=0)
        d_z_k = d_logits_k @ params.psi_w[k]
        if cache.shared:
            d_z_shared += d_z_k
        else:
            d_ws, d_bs, d_pool_k = encoder_backward(cache.enc_caches[k], d_z_k)
            flat = flatten_layer_grads(d_ws, params.theta.block_map)
            theta_grad += flat * masks.bits[k]
            for i, g in enumerate(d_bs):
                bias_grads[i] += g
            d_pooled += d_pool_k
    if cache.shared:
        d_ws, d_bs, d_pooled = encoder_backward(cache.enc_caches[0], d_z_shared)
        flat = flatten_layer_grads(d_ws, params.theta.block_map)
        if masks is not None:
            flat = flat * masks.bits[0]
        theta_grad = flat
        bias_grads = list(d_bs)
    return Grads(
        emb_pooled=d_pooled,
        theta=theta_grad,
        enc_biases=bias_grads,
        psi_w=psi_w_grad,
        psi_b=psi_b_grad,
        phi=phi_grad,
    )


def predict_batch(pooled: np.ndarray, params: ModelParams, masks: MaskSet | None):
    """(task classes, concept classes) for pooled inputs; ties to lowest index."""
    cache = forward_pathway_batch(pooled, params, masks)
    task = cache.task_logits.argmax(axis=1)
    concepts = cache.concept_logits.argmax(axis=2)
    return task, concepts


def predict(example: Example, params: ModelParams, masks: MaskSet | None):
    pooled = pooled_embedding(example, params)[None, :]
    task, concepts = predict_batch(pooled, params, masks)
    return int(task[0]), concepts[0]


# ---------------------------------------------------------------------------
# Single-example loss backward (the public gradient surface)
# ---------------------------------------------------------------------------


def backward(example: Example, params: ModelParams, masks: MaskSet | None, gamma: float):
    """Loss and exact gradients for one example under the decomposed objective.

    Returns (loss, GradRecord, Grads). GradRecord.grads is the gradient with
    respect to the stored prunable weights (mask bits applied); input_grads
    holds one row per token position. Raises NumericError on non-finite
    values, naming the offending block.
    """
    pooled = pooled_embedding(example, params)[None, :]
    cache = forward_pathway_batch(pooled, params, masks)
    p_task = softmax(cache.task_logits)
    loss = -log_softmax(cache.task_logits)[0, example.task_label]
    d_task = p_task.copy()
    d_task[0, example.task_label] -= 1.0
    d_concept = softmax(cache.concept_logits)
    for k in range(params.psi_w.shape[0]):
        d_concept[0, k, example.concept_labels[k]] -= 1.0
        loss += gamma * (-log_softmax(cache.concept_logits[:, k, :])[0, example.concept_labels[k]])
    d_concept *= gamma
    if not np.isfinite(loss):
        raise NumericError("non-finite loss", block="pathway")
    grads = backward_pathway(cache, params, masks, d_task, d_concept)
    n_tokens = len(example.token_ids)
    if n_tokens == 0:
        input_grads = np.zeros((0, params.embeddings.shape[1]))
    else:
        input_grads = np.repeat(grads.emb_pooled, n_tokens, axis=0) / n_tokens
    record = GradRecord(grads=grads.theta, input_grads=input_grads)
    record.check_finite(params.theta.block_map)
    return float(loss), record, grads


# ---------------------------------------------------------------------------
# Flat views over the trainable set (optimizer and gradient checking)
# ---------------------------------------------------------------------------


def trainable_entries(params: ModelParams, include_direct: bool = False):
    """Ordered (name, array) pairs covering every trainable parameter."""
    entries = [("embeddings", params.embeddings), ("theta", params.theta.values)]
    entries += [(f"enc.b{i + 1}", b) for i, b in enumerate(params.enc_biases)]
    entries += [("psi.weight", params.psi_w), ("psi.bias", params.psi_b), ("phi.weight", params.phi)]
    if include_direct:
        if params.direct_w is None:
            raise ValueError("model has no direct head")
        entries += [("direct.weight", params.direct_w), ("direct.bias", params.direct_b)]
    return entries


def flatten_trainables(params: ModelParams, include_direct: bool = False) -> np.ndarray:
    return np.concatenate([a.ravel() for _, a in trainable_entries(params, include_direct)])


def write_flat_trainables(params: ModelParams, vec: np.ndarray, include_direct: bool = False) -> None:
    offset = 0
    for _, arr in trainable_entries(params, include_direct):
        arr.flat[:] = vec[offset : offset + arr.size]
        offset += arr.size
    if offset != vec.size:
        raise ValueError("flat vector length does not match the trainable set")


def scatter_input_grads(example: Example, input_grads: np.ndarray, vocab_size: int, emb_dim: int) -> np.ndarray:
    """Map per-position input gradients back onto the embedding table."""
    d_emb = np.zeros((vocab_size, emb_dim))
    if len(example.token_ids) == 0:
        return d_emb
    np.add.at(d_emb, example.token_ids, input_grads)
    return d_emb


def decomposed_loss_value(example: Example, params: ModelParams, masks: MaskSet | None, gamma: float) -> float:
    """Loss only (no gradients); used by the finite-difference oracle."""
    pooled = pooled_embedding(example, params)[None, :]
    cache = forward_pathway_batch(pooled, params, masks)
    loss = -log_softmax(cache.task_logits)[0, example.task_label]
    for k in range(params.psi_w.shape[0]):
        loss += gamma * (
            -log_softmax(cache.concept_logits[:, k, :])[0, example.concept_labels[k]]
        )
    return float(loss)


def finite_difference_report(example: Example, params: ModelParams, masks: MaskSet | None, gamma: float, eps: float = 1e-6):
    """Central-difference check of the full-graph gradients for one example.

    Covers every trainable parameter (embeddings included, via the pooled
    chain). Returns the FDReport from :func:`diffcore.finite_difference_check`.
    """
    from .diffcore import finite_difference_check

    _, record, grads = backward(example, params, masks, gamma)
    d_emb = scatter_input_grads(
        example, record.input_grads, params.embeddings.shape[0], params.embeddings.shape[1]
    )
    if len(example.token_ids) == 0:
        # Empty input pools the PAD embedding, which therefore carries the
        # gradient even though no token position exists.
        d_emb[PAD_ID] = grads.emb_pooled[0]
    analytic = np.concatenate(
        [d_emb.ravel(), grads.theta]
        + [g.ravel() for g in grads.enc_biases]
        + [grads.psi_w.ravel(), grads.psi_b.ravel(), grads.phi.ravel()]
    )
    x0 = flatten_trainables(params)
    template = params.copy()

    def loss_fn(vec):
        write_flat_trainables(template, vec)
        return decomposed_loss_value(example, template, masks, gamma)

    return finite_difference_check(loss_fn, x0, analytic, eps)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _b64_f64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _from_b64_f64(data: str, shape) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"))
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise DataError(f"block data holds {arr.size} values, expected {expected}")
    return arr.reshape(shape)


def save_checkpoint(params: ModelParams, masks: MaskSet, config: ModelConfig, schema: DatasetSchema, path) -> None:
    """Write the versioned JSON checkpoint container.

    Block data is base64 of little-endian float64, flattened row-major in
    block-map order; mask bitsets are base64 with bit i of byte j addressing
    flat index 8*j + i (little bit order).
    """
    blocks = [
        {
            "name": "embeddings",
            "rows": params.embeddings.shape[0],
            "cols": params.embeddings.shape[1],
            "data": _b64_f64(params.embeddings),
        }
    ]
    for blk in params.theta.block_map:
        blocks.append(
            {
                "name": blk.name,
                "rows": blk.rows,
                "cols": blk.cols,
                "data": _b64_f64(params.theta.values[blk.offset : blk.stop]),
            }
        )
    for i, b in enumerate(params.enc_biases):
        blocks.append({"name": f"enc.b{i + 1}", "rows": 1, "cols": b.size, "data": _b64_f64(b)})
    for k in range(config.n_concepts):
        blocks.append(
            {
                "name": f"psi.{k}.weight",
                "rows": params.psi_w.shape[1],
                "cols": params.psi_w.shape[2],
                "data": _b64_f64(params.psi_w[k]),
            }
        )
        blocks.append(
            {"name": f"psi.{k}.bias", "rows": 1, "cols": params.psi_b.shape[1], "data": _b64_f64(params.psi_b[k])}
        )
    for k in range(config.n_concepts):
        blocks.append(
            {
                "name": f"phi.{k}.weight",
                "rows": params.phi.shape[1],
                "cols": params.phi.shape[2],
                "data": _b64_f64(params.phi[k]),
            }
        )
    if params.direct_w is not None:
        blocks.append(
            {
                "name": "direct.weight",
                "rows": params.direct_w.shape[0],
                "cols": params.direct_w.shape[1],
                "data": _b64_f64(params.direct_w),
            }
        )
        blocks.append(
            {"name": "direct.bias", "rows": 1, "cols": params.direct_b.size, "data": _b64_f64(params.direct_b)}
        )
    mask_entries = [
        {
            "concept": schema.concept_names[k],
            "data": base64.b64encode(
                np.packbits(masks.bits[k], bitorder="little").tobytes()
            ).decode("ascii"),
        }
        for k in range(masks.n_concepts)
    ]
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "schema": schema.to_dict(),
        "blocks": blocks,
        "masks": mask_entries,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint container; returns (params, masks, config, schema)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupted checkpoint: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(
            f"{path}: unsupported checkpoint version {doc.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    try:
        config = ModelConfig.from_dict(doc["config"])
        schema = DatasetSchema.from_dict(doc["schema"])
        by_name = {b["name"]: b for b in doc["blocks"]}

        def block_array(name):
            b = by_name[name]
            return _from_b64_f64(b["data"], (int(b["rows"]), int(b["cols"])))

        params = init_params(config)
        params.embeddings = block_array("embeddings")
        chunks = [block_array(blk.name).ravel() for blk in params.theta.block_map]
        params.theta = ParamVector(np.concatenate(chunks), params.theta.block_map)
        params.enc_biases = [
            block_array(f"enc.b{i + 1}").ravel() for i in range(len(params.enc_biases))
        ]
        for k in range(config.n_concepts):
            params.psi_w[k] = block_array(f"psi.{k}.weight")
            params.psi_b[k] = block_array(f"psi.{k}.bias").ravel()
            params.phi[k] = block_array(f"phi.{k}.weight")
        if "direct.weight" in by_name:
            params.direct_w = block_array("direct.weight")
            params.direct_b = block_array("direct.bias").ravel()
        n_prunable = params.n_prunable
        bits = np.zeros((config.n_concepts, n_prunable), dtype=np.uint8)
        mask_by_name = {m["concept"]: m for m in doc["masks"]}
        for k, name in enumerate(schema.concept_names):
            raw = base64.b64decode(mask_by_name[name]["data"].encode("ascii"))
            unpacked = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
            if unpacked.size < n_prunable:
                raise DataError(f"{path}: mask for {name!r} too short")
            bits[k] = unpacked[:n_prunable]
        masks = MaskSet(bits)
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{path}: invalid checkpoint contents: {exc}") from exc
    return params, masks, config, schema
