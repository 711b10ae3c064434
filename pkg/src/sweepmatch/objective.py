"""Score matrix with learnable dustbin and the training losses.

The score matrix is the (b1+1) x (b2+1) dot-product block of two embedding
batches with the learnable rejection threshold alpha filling the last row
and column. Losses: bidirectional softmax cross-entropy over it, a linear
pull/push triplet term driven by probe distance, and IVPP-style weighted
cross-entropy for the baseline training modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .sampler import PairLabels

ABLATION_MODES = ("sce", "p1", "p2", "full")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    triplet_weight: float = 0.1
    triplet_dmax_mm: float = 20.0
    logit_scale_mode: str = "as-written"  # or "inverse-tau"
    normalize_by_batch: bool = True
    norm_spread_weight: float = 0.0

    def __post_init__(self):
        if self.tau <= 0 or self.triplet_dmax_mm <= 0:
            raise ValueError("tau and triplet_dmax_mm must be positive")
        if self.norm_spread_weight < 0:
            raise ValueError("norm_spread_weight must be non-negative")
        if self.logit_scale_mode not in ("as-written", "inverse-tau"):
            raise ValueError(f"unknown logit_scale_mode {self.logit_scale_mode!r}")

    @property
    def logit_scale(self) -> float:
        if self.logit_scale_mode == "as-written":
            return float(np.exp(self.tau))
        return 1.0 / self.tau


def score_matrix(z1: Tensor, z2: Tensor, alpha: Tensor) -> Tensor:
    """Dot products of two embedding batches, dustbin-augmented."""
    if z1.shape[1] != z2.shape[1]:
        raise ShapeError(f"embedding dims differ: {z1.shape} vs {z2.shape}")
    return T.dustbin_augment(T.matmul(z1, T.transpose(z2)), alpha)


def _directional_ce(m: Tensor, labels: PairLabels, scale: float):
    """Row-direction and column-direction CE vectors over the inner batches."""
    b1, b2 = labels.distance_matrix_mm.shape
    rows = T.mul(m[:b1, :], scale)
    cols = T.mul(T.transpose(m[:, :b2]), scale)
    ce_rows = T.cross_entropy_rows(rows, labels.gt_1to2)
    ce_cols = T.cross_entropy_rows(cols, labels.gt_2to1)
    return ce_rows, ce_cols, b1, b2


def symmetric_ce_loss(m: Tensor, labels: PairLabels, config: LossConfig) -> Tensor:
    """Bidirectional softmax cross-entropy over the dustbin-augmented score
    matrix, averaged over the two directions. The dustbin row/column appear
    only as an extra class, never as queries.

    With normalize_by_batch each direction is a mean over its batch (the
    literal form sums instead).
    """
    ce_rows, ce_cols, b1, b2 = _directional_ce(m, labels, config.logit_scale)
    if config.normalize_by_batch:
        total = T.add(T.mean(ce_rows), T.mean(ce_cols))
    else:
        total = T.add(T.sum_(ce_rows), T.sum_(ce_cols))
    return T.mul(total, 0.5)


def weighted_ce_loss(m: Tensor, labels: PairLabels, weights_1to2: np.ndarray,
                     weights_2to1: np.ndarray, config: LossConfig) -> Tensor:
    """Symmetric CE with per-query weights clamped to [0, 1].

    Weights apply to the labeled pair of each row/column; dustbin-labeled
    queries keep weight 1 (there is no pair to down-weight).
    """
    ce_rows, ce_cols, b1, b2 = _directional_ce(m, labels, config.logit_scale)
    w1 = np.clip(np.asarray(weights_1to2, dtype=np.float64), 0.0, 1.0)
    w2 = np.clip(np.asarray(weights_2to1, dtype=np.float64), 0.0, 1.0)
    w1 = np.where(labels.gt_1to2 == labels.dustbin_1to2, 1.0, w1)
    w2 = np.where(labels.gt_2to1 == labels.dustbin_2to1, 1.0, w2)
    wr = T.sum_(T.mul(ce_rows, w1.astype(ce_rows.dtype)))
    wc = T.sum_(T.mul(ce_cols, w2.astype(ce_cols.dtype)))
    if config.normalize_by_batch:
        wr, wc = T.mul(wr, 1.0 / b1), T.mul(wc, 1.0 / b2)
    return T.mul(T.add(wr, wc), 0.5)


def triplet_loss(m_inner: Tensor, distance_matrix_mm: np.ndarray,
                 d_max_mm: float = 20.0) -> Tensor:
    """Sum over pairs of d_ij * M_ij - (1 - d_ij) * M_ji with
    d_ij = clamp(distance / d_max, 0, 1): push apart far pairs, pull
    together near ones. Requires a square inner block."""
    b1, b2 = m_inner.shape
    if b1 != b2:
        raise ShapeError(f"triplet loss needs a square inner block, got {m_inner.shape}")
    if distance_matrix_mm.shape != (b1, b2):
        raise ShapeError("distance matrix does not match the score block")
    d = np.clip(np.asarray(distance_matrix_mm, dtype=np.float64) / d_max_mm,
                0.0, 1.0).astype(m_inner.dtype)
    pull_push = T.sub(T.mul(m_inner, d), T.mul(T.transpose(m_inner), 1.0 - d))
    return T.sum_(pull_push)


def _batch_norm_variance(z: Tensor) -> Tensor:
    n = T.sum_(T.mul(z, z), axis=1)
    dev = T.sub(n, T.mean(n))
    return T.mean(T.mul(dev, dev))


def norm_spread_penalty(z1: Tensor, z2: Tensor) -> Tensor:
    """Mean variance of squared embedding norms over the two batches.

    Retrieval compares raw (unnormalized) dot products, so a frame whose
    neighbor carries a larger norm can out-score the frame itself even at
    sub-unit cosine. Shrinking the norm spread removes that failure mode
    without normalizing the embeddings.
    """
    return T.mul(T.add(_batch_norm_variance(z1), _batch_norm_variance(z2)), 0.5)


def total_loss(m: Tensor, labels: PairLabels, config: LossConfig,
               mode: str = "full") -> Tensor:
    """Ablation-aware combined loss over a dustbin-augmented score matrix.

    Modes: 'sce' and 'p1' are pure symmetric CE (they differ upstream in
    how labels were produced); 'p2' and 'full' add the probe-distance
    triplet term scaled by triplet_weight.
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}")
    loss = symmetric_ce_loss(m, labels, config)
    if mode in ("p2", "full") and config.triplet_weight != 0.0:
        b1, b2 = labels.distance_matrix_mm.shape
        trip = triplet_loss(m[:b1, :b2], labels.distance_matrix_mm,
                            config.triplet_dmax_mm)
        scale = config.triplet_weight
        if config.normalize_by_batch:
            scale = scale / (b1 * b2)
        loss = T.add(loss, T.mul(trip, scale))
    return loss
