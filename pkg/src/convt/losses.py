"""Hybrid training loss: margin-adjusted cross-entropy plus mined triplets.

The classification term subtracts a fixed margin from each sample's true-class
logit before the softmax, which widens the gap a sample must clear to be
confidently classified. The metric term mines anchor/positive/negative index
triples inside the batch and applies a hinge on squared-Euclidean embedding
distances. The two terms are summed unweighted.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    gather_rows,
    log_softmax,
    relu,
    sub,
    take_per_row,
    tensor_mean,
    tensor_sum,
)

__all__ = [
    "MarginConfig",
    "Triplet",
    "LossReport",
    "lm_softmax_ce",
    "mine_triplets",
    "triplet_loss",
    "hybrid_loss",
    "pairwise_sq_distances",
]

MINING_MODES = ("batch_all", "batch_hard")


@dataclass(frozen=True)
class MarginConfig:
    """Margins and mining mode; distances are squared Euclidean on embeddings."""

    lm_margin: float = 0.35
    triplet_margin: float = 0.3
    mining: str = "batch_all"

    def validate(self) -> None:
        if not np.isfinite(self.lm_margin) or self.lm_margin < 0:
            raise ValueError(f"lm_margin must be finite and >= 0, got {self.lm_margin}")
        if not np.isfinite(self.triplet_margin) or self.triplet_margin <= 0:
            raise ValueError(f"triplet_margin must be finite and > 0, got {self.triplet_margin}")
        if self.mining not in MINING_MODES:
            raise ValueError(f"mining must be one of {MINING_MODES}, got {self.mining!r}")


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


@dataclass
class LossReport:
    """Scalar loss tensors plus mining statistics for one batch.

    ``total`` is computed as ``cross_entropy + triplet`` in that exact order,
    so the additivity invariant holds bit for bit.
    """

    cross_entropy: Tensor
    triplet: Tensor
    total: Tensor
    num_triplets: int
    num_active: int


def lm_softmax_ce(logits: Tensor, labels, lm_margin: float = 0.0) -> Tensor:
    """Mean cross-entropy after subtracting lm_margin from true-class logits.

    With lm_margin 0 this is exactly standard softmax cross-entropy.
    """
    if logits.ndim != 2:
        raise ValueError(f"logits must be [B, C], got shape {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels must have shape ({b},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels out of range [0, {c}): {labels[(labels < 0) | (labels >= c)]}")
    if lm_margin < 0 or not np.isfinite(lm_margin):
        raise ValueError(f"lm_margin must be finite and >= 0, got {lm_margin}")

    adjust = np.zeros((b, c), dtype=logits.dtype)
    adjust[np.arange(b), labels] = lm_margin
    adjusted = sub(logits, Tensor(adjust))
    log_p = take_per_row(log_softmax(adjusted, axis=-1), labels)
    return -tensor_mean(log_p)


def pairwise_sq_distances(embeddings: np.ndarray) -> np.ndarray:
    """Exact [B, B] squared-Euclidean distance table (plain arrays)."""
    diff = embeddings[:, None, :] - embeddings[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def mine_triplets(embeddings, labels, mining: str = "batch_all") -> list[Triplet]:
    """Enumerate in-batch triplets, deterministically ordered.

    batch_all lists every valid (anchor, positive, negative) in lexicographic
    index order. batch_hard keeps, per anchor, the farthest positive and the
    nearest negative (first index wins ties). When no valid triplet exists the
    list is empty and a warning is emitted; the caller treats the triplet term
    as zero.
    """
    if mining not in MINING_MODES:
        raise ValueError(f"mining must be one of {MINING_MODES}, got {mining!r}")
    emb = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    labels = np.asarray(labels)
    b = len(labels)
    same = labels[:, None] == labels[None, :]
    not_self = ~np.eye(b, dtype=bool)
    pos_mask = same & not_self

    triplets: list[Triplet] = []
    if mining == "batch_all":
        for a in range(b):
            positives = np.flatnonzero(pos_mask[a])
            negatives = np.flatnonzero(~same[a])
            for p in positives:
                for n in negatives:
                    triplets.append(Triplet(a, int(p), int(n)))
    else:  # batch_hard
        dist = pairwise_sq_distances(emb.astype(np.float64))
        for a in range(b):
            positives = np.flatnonzero(pos_mask[a])
            negatives = np.flatnonzero(~same[a])
            if positives.size == 0 or negatives.size == 0:
                continue
            p = positives[int(np.argmax(dist[a, positives]))]
            n = negatives[int(np.argmin(dist[a, negatives]))]
            triplets.append(Triplet(a, int(p), int(n)))

    if not triplets:
        warnings.warn("no valid triplets in batch; triplet loss will be zero", stacklevel=2)
    return triplets


def _triplet_index_arrays(triplets):
    a = np.array([t.anchor for t in triplets], dtype=np.intp)
    p = np.array([t.positive for t in triplets], dtype=np.intp)
    n = np.array([t.negative for t in triplets], dtype=np.intp)
    return a, p, n


def triplet_loss(embeddings: Tensor, triplets, triplet_margin: float) -> Tensor:
    """Mean hinge over triplets: max(d(a,p) - d(a,n) + margin, 0).

    Distances are squared Euclidean. An empty triplet list yields exactly 0.
    """
    if not triplets:
        return Tensor(np.zeros((), dtype=embeddings.dtype if isinstance(embeddings, Tensor) else np.float64))
    ia, ip, in_ = _triplet_index_arrays(triplets)
    a = gather_rows(embeddings, ia)
    p = gather_rows(embeddings, ip)
    n = gather_rows(embeddings, in_)
    ap = sub(a, p)
    an = sub(a, n)
    d_ap = tensor_sum(ap * ap, axis=1)
    d_an = tensor_sum(an * an, axis=1)
    hinge = relu(sub(d_ap, d_an) + float(triplet_margin))
    return tensor_mean(hinge)


def _active_triplet_count(emb: np.ndarray, triplets, margin: float) -> int:
    if not triplets:
        return 0
    ia, ip, in_ = _triplet_index_arrays(triplets)
    d_ap = ((emb[ia] - emb[ip]) ** 2).sum(axis=1)
    d_an = ((emb[ia] - emb[in_]) ** 2).sum(axis=1)
    return int(np.count_nonzero(d_ap - d_an + margin > 0))


def hybrid_loss(
    logits: Tensor,
    embeddings: Tensor,
    labels,
    margins: MarginConfig,
    mining_enabled: bool = True,
) -> LossReport:
    """Classification loss plus triplet loss, summed unweighted.

    Gradient flows to the logits through the cross-entropy term and to the
    embeddings through the triplet term. ``mining_enabled=False`` forces the
    triplet term to zero (used for tiny batches and ablations).
    """
    margins.validate()
    labels = np.asarray(labels, dtype=np.intp)
    if logits.shape[0] != embeddings.shape[0] or logits.shape[0] != len(labels):
        raise ValueError(
            f"batch size mismatch: logits {logits.shape}, embeddings {embeddings.shape}, "
            f"{len(labels)} labels"
        )
    ce = lm_softmax_ce(logits, labels, margins.lm_margin)
    if mining_enabled:
        triplets = mine_triplets(embeddings, labels, margins.mining)
    else:
        triplets = []
    trip = triplet_loss(embeddings, triplets, margins.triplet_margin)
    total = ce + trip
    return LossReport(
        cross_entropy=ce,
        triplet=trip,
        total=total,
        num_triplets=len(triplets),
        num_active=_active_triplet_count(
            embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings),
            triplets,
            margins.triplet_margin,
        ),
    )
