"""Dense linear algebra primitives and gradient checking.

Everything runs in float64. The forward operations here are the building
blocks of the fixed classifier graph (embedding -> mean pool -> ReLU MLP ->
projector -> classifier); the graph itself and its reverse-mode pass live in
:mod:`sparsecbm.model`. This module also provides the central-difference
oracle used to verify every analytic gradient in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError


@dataclass(frozen=True)
class Block:
    """One named matrix inside a flat parameter vector (row-major)."""

    name: str
    offset: int
    rows: int
    cols: int

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def stop(self) -> int:
        return self.offset + self.size


class ParamVector:
    """Flat float64 parameter store with a fixed block layout.

    The block order is fixed at construction time and is load-bearing: mask
    bitsets and checkpoints index into the same flat space, so the layout
    must never change once a model exists.
    """

    def __init__(self, values, block_map):
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("ParamVector values must be one-dimensional")
        offset = 0
        for blk in block_map:
            if blk.offset != offset:
                raise ValueError(
                    f"block {blk.name!r} starts at {blk.offset}, expected {offset}"
                )
            offset += blk.size
        if offset != values.size:
            raise ValueError(
                f"block map covers {offset} entries, values has {values.size}"
            )
        self.values = values
        self.block_map = tuple(block_map)

    def __len__(self) -> int:
        return self.values.size

    def view(self, name: str) -> np.ndarray:
        """Matrix view of one block; writes through to the flat storage."""
        blk = self.block(name)
        return self.values[blk.offset : blk.stop].reshape(blk.rows, blk.cols)

    def block(self, name: str) -> Block:
        for blk in self.block_map:
            if blk.name == name:
                return blk
        raise KeyError(name)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.block_map)


@dataclass
class GradRecord:
    """Gradients aligned index-for-index with a ParamVector.

    ``input_grads`` holds one gradient row per token position (over the
    embedding dimension) for the example the backward pass consumed.
    """

    grads: np.ndarray
    input_grads: np.ndarray

    def check_finite(self, block_map) -> "GradRecord":
        if not np.all(np.isfinite(self.input_grads)):
            raise NumericError("non-finite input gradient", block="inputs")
        for blk in block_map:
            seg = self.grads[blk.offset : blk.stop]
            if not np.all(np.isfinite(seg)):
                raise NumericError("non-finite gradient", block=blk.name)
        return self


def affine(weights, bias, x) -> np.ndarray:
    """weights @ x + bias with strict shape validation."""
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if weights.ndim != 2 or bias.ndim != 1 or x.ndim != 1:
        raise ValueError("affine expects a matrix, a bias vector and an input vector")
    if weights.shape[1] != x.size or weights.shape[0] != bias.size:
        raise ValueError(
            f"affine shape mismatch: weights {weights.shape}, bias {bias.shape}, "
            f"input {x.shape}"
        )
    return weights @ x + bias


def relu(v) -> np.ndarray:
    return np.maximum(np.asarray(v, dtype=np.float64), 0.0)


def sigmoid(v) -> np.ndarray:
    """Elementwise logistic function, overflow-safe over the float64 range."""
    v = np.asarray(v, dtype=np.float64)
    # Evaluate exp only on the non-positive side of each branch.
    pos = 1.0 / (1.0 + np.exp(-np.clip(v, 0.0, None)))
    ev = np.exp(np.clip(v, None, 0.0))
    neg = ev / (1.0 + ev)
    return np.where(v >= 0, pos, neg)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log softmax with max subtraction (works on 1-d and 2-d)."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, label: int) -> float:
    """-log softmax(logits)[label] for a single logit vector."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError("softmax_cross_entropy expects a 1-d logit vector")
    if not 0 <= label < logits.size:
        raise ValueError(f"label {label} out of range for {logits.size} classes")
    return float(-log_softmax(logits)[label])


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray):
    """Mean CE over rows plus the gradient seed d(mean CE)/d(logits)."""
    n = logits.shape[0]
    p = softmax(logits)
    losses = -log_softmax(logits)[np.arange(n), labels]
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    return float(losses.mean()), d / n


@dataclass
class FDReport:
    """Central-difference comparison against analytic gradients."""

    max_rel_err: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def rel_errs(self) -> np.ndarray:
        return np.abs(self.analytic - self.numeric) / (np.abs(self.numeric) + 1e-12)


def finite_difference_check(loss_fn, x0: np.ndarray, analytic: np.ndarray, eps: float) -> FDReport:
    """Compare analytic gradients of ``loss_fn`` at ``x0`` to central differences.

    ``loss_fn`` maps a flat float64 vector to a scalar and must not retain a
    reference to its argument. Relative error per coordinate is
    |analytic - numeric| / (|numeric| + 1e-12).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.asarray(x0, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x0.shape:
        raise ValueError("analytic gradient shape does not match parameters")
    numeric = np.empty_like(x0)
    x = x0.copy()
    for i in range(x0.size):
        orig = x[i]
        x[i] = orig + eps
        up = loss_fn(x)
        x[i] = orig - eps
        down = loss_fn(x)
        x[i] = orig
        numeric[i] = (up - down) / (2.0 * eps)
    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)
    worst = int(np.argmax(rel)) if rel.size else 0
    return FDReport(
        max_rel_err=float(rel.max()) if rel.size else 0.0,
        worst_index=worst,
        analytic=analytic,
        numeric=numeric,
    )
