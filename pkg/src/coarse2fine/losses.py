"""Pretraining objectives: cross-entropy, L1, SimCLR, SupCon, SimSiam.

Contrastive batches hold 2N projection rows where rows (2k, 2k+1) are the two
augmented views of source k. Losses are returned as means over anchors so the
magnitude does not depend on batch size; pass reduction="sum" to compare
against literal double-loop evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateBatchError
from .tensor import Tensor

NEG_MASK = -1e9  # underflows to exactly 0 after max-subtracted softmax


@dataclass
class ContrastiveBatch:
    z: Tensor  # (2N, d), unit-norm rows
    labels: np.ndarray | None = None  # (N,) source labels, SupCon only
    temperature: float = 0.07

    def __post_init__(self):
        self.z = T.as_tensor(self.z)
        if self.temperature <= 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if self.z.data.ndim != 2 or self.z.data.shape[0] < 2 or self.z.data.shape[0] % 2:
            raise ContractError(f"batch must hold 2N >= 2 rows, got shape {self.z.data.shape}")
        norms = np.linalg.norm(self.z.data, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-8):
            raise ContractError("contrastive batch rows must be unit-norm (within 1e-8)")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (self.z.data.shape[0] // 2,):
                raise ContractError(
                    f"labels must have one entry per source pair, got {self.labels.shape}"
                )

    @property
    def num_rows(self):
        return self.z.data.shape[0]

    def row_labels(self):
        if self.labels is None:
            raise ContractError("batch has no labels")
        return np.repeat(self.labels, 2)


def cross_entropy_loss(logits, labels) -> Tensor:
    """Mean negative log-softmax of the true class."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ContractError(
            f"cross_entropy expects (B, K) logits and (B,) labels, got "
            f"{logits.data.shape} and {labels.shape}"
        )
    n, k = logits.data.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"label outside [0, {k}): {labels.min()}..{labels.max()}")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = T.sum(T.mul(T.log_softmax(logits, axis=-1), Tensor(onehot)))
    return picked * (-1.0 / n)


def l1_loss(pred, target) -> Tensor:
    """Mean absolute error; subgradient 0 at equality."""
    pred = T.as_tensor(pred)
    target = T.as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ContractError(f"l1 shapes differ: {pred.data.shape} vs {target.data.shape}")
    return T.mean(T.absolute(T.sub(pred, target)))


def _masked_log_softmax(batch: ContrastiveBatch):
    """Row-wise log of exp(sim/tau) over all columns except the diagonal."""
    n = batch.num_rows
    sim = T.matmul(batch.z, T.transpose(batch.z)) * (1.0 / batch.temperature)
    mask = np.zeros((n, n))
    np.fill_diagonal(mask, NEG_MASK)
    return T.log_softmax(T.add(sim, Tensor(mask)), axis=-1)


def _reduce(total, count, reduction):
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total * (1.0 / count)
    raise ContractError(f"unknown reduction {reduction!r}")


def simclr_loss(batch: ContrastiveBatch, reduction="mean") -> Tensor:
    """Instance-discrimination loss: each view attracts its sibling view
    against the remaining 2N - 1 rows."""
    n = batch.num_rows
    log_prob = _masked_log_softmax(batch)
    pos = np.zeros((n, n))
    idx = np.arange(n)
    pos[idx, idx ^ 1] = 1.0  # sibling view of row i is row i XOR 1
    total = T.sum(T.mul(log_prob, Tensor(pos))) * -1.0
    return _reduce(total, n, reduction)


def supcon_loss(batch: ContrastiveBatch, reduction="mean") -> Tensor:
    """Supervised contrastive loss, positives-outside-log form.

    Each anchor averages -log p over every same-label row; anchors without
    positives contribute nothing and do not count toward the mean.
    """
    if batch.labels is None:
        raise ContractError("supcon_loss requires labels")
    n = batch.num_rows
    row_labels = batch.row_labels()
    same = (row_labels[:, None] == row_labels[None, :]).astype(np.float64)
    np.fill_diagonal(same, 0.0)
    pos_counts = same.sum(axis=1)
    active = pos_counts > 0
    if not active.any():
        raise DegenerateBatchError("every anchor has an empty positive set")
    weights = np.where(active[:, None], same / np.maximum(pos_counts, 1.0)[:, None], 0.0)
    log_prob = _masked_log_softmax(batch)
    total = T.sum(T.mul(log_prob, Tensor(weights))) * -1.0
    return _reduce(total, int(active.sum()), reduction)


def simsiam_loss(p1, z1, p2, z2) -> Tensor:
    """Negative symmetric cosine between predictions and stop-gradient targets."""
    p1, p2 = T.as_tensor(p1), T.as_tensor(p2)
    z1, z2 = T.as_tensor(z1), T.as_tensor(z2)
    for a, b in ((p1, z2), (p2, z1)):
        if a.data.shape != b.data.shape or a.data.ndim != 2:
            raise ContractError(
                f"simsiam expects matching 2-D batches, got {a.data.shape} vs {b.data.shape}"
            )
    c1 = T.mean(T.cosine_similarity(p1, T.stop_gradient(z2), axis=-1))
    c2 = T.mean(T.cosine_similarity(p2, T.stop_gradient(z1), axis=-1))
    return T.add(c1, c2) * -0.5
