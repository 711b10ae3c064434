"""Batch construction and pair labeling.

Intra-sweep training draws two overlapping batches from one sweep; pairs
are labeled by probe distance (closest-under-threshold is the positive,
everything else negative, no candidate means dustbin). Also houses the
inter-sweep baseline sampler and the IVPP / distance-IVPP sample weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sweeps import ProbePose, Sweep, probe_distance


@dataclass(frozen=True)
class DualBatch:
    sweep_id: str
    batch1_indices: list[int]
    batch2_indices: list[int]
    shared_count: int


@dataclass(frozen=True)
class PairLabels:
    """Positive-partner indices per direction; value b means the dustbin."""

    gt_1to2: np.ndarray  # length b1, values in [0, b2]
    gt_2to1: np.ndarray  # length b2, values in [0, b1]
    distance_matrix_mm: np.ndarray  # b1 x b2

    @property
    def dustbin_1to2(self):
        return self.distance_matrix_mm.shape[1]

    @property
    def dustbin_2to1(self):
        return self.distance_matrix_mm.shape[0]


def sample_dual_batches(sweep: Sweep, b: int, rng: np.random.Generator,
                        overlap_frac: float = 0.75) -> DualBatch:
    """Draw batch1 uniformly, carry floor(overlap*b) of it into batch2 and
    top batch2 up with frames not seen in batch1."""
    shared = int(np.floor(overlap_frac * b))
    fresh = b - shared
    needed = b + fresh
    if len(sweep) < needed:
        raise ValueError(
            f"sweep {sweep.id} has {len(sweep)} frames; need at least {needed} "
            f"for b={b}, overlap={overlap_frac}"
        )
    all_indices = np.arange(len(sweep))
    batch1 = rng.choice(all_indices, size=b, replace=False)
    carried = rng.choice(batch1, size=shared, replace=False)
    if fresh > 0:
        outside = np.setdiff1d(all_indices, batch1)
        fresh_draw = rng.choice(outside, size=fresh, replace=False)
    else:
        fresh_draw = np.empty(0, dtype=np.int64)
    batch2 = np.concatenate([carried, fresh_draw])
    batch2 = rng.permutation(batch2)
    return DualBatch(
        sweep_id=sweep.id,
        batch1_indices=[int(i) for i in batch1],
        batch2_indices=[int(i) for i in batch2],
        shared_count=shared,
    )


def label_from_distance_matrix(dist: np.ndarray, threshold: float) -> PairLabels:
    """Label rows and columns of a pairwise-distance matrix.

    Per row: among entries strictly below threshold the smallest one is the
    positive (ties to the lower index); no candidate maps to the dustbin
    class (index = number of columns). Columns are labeled symmetrically.
    """
    b1, b2 = dist.shape
    gt_1to2 = np.full(b1, b2, dtype=np.int64)
    for i in range(b1):
        j = int(np.argmin(dist[i]))
        if dist[i, j] < threshold:
            gt_1to2[i] = j
    gt_2to1 = np.full(b2, b1, dtype=np.int64)
    for j in range(b2):
        i = int(np.argmin(dist[:, j]))
        if dist[i, j] < threshold:
            gt_2to1[j] = i
    return PairLabels(gt_1to2=gt_1to2, gt_2to1=gt_2to1, distance_matrix_mm=dist)


def pose_distance_matrix(poses1: list[ProbePose], poses2: list[ProbePose]):
    p1 = np.array([p.position for p in poses1])
    p2 = np.array([p.position for p in poses2])
    diff = p1[:, None, :] - p2[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def label_pairs(poses1: list[ProbePose], poses2: list[ProbePose],
                threshold_mm: float = 10.0) -> PairLabels:
    """Probe-distance pair labels with a dustbin for unmatched queries."""
    if not poses1 or not poses2:
        raise ValueError("pose lists must be nonempty")
    return label_from_distance_matrix(pose_distance_matrix(poses1, poses2),
                                      threshold_mm)


def label_same_frame(indices1: list[int], indices2: list[int]) -> PairLabels:
    """Positive iff the two entries come from the same source frame."""
    d = np.where(np.equal.outer(np.asarray(indices1), np.asarray(indices2)),
                 0.0, 1.0)
    return label_from_distance_matrix(d, threshold=0.5)


def label_temporal(indices1: list[int], indices2: list[int],
                   delta_t: int = 8) -> PairLabels:
    """Temporal-proximity labels: positive is the nearest frame within
    delta_t frames (IVPP-style supervision without probe poses)."""
    d = np.abs(np.subtract.outer(np.asarray(indices1, dtype=np.float64),
                                 np.asarray(indices2, dtype=np.float64)))
    return label_from_distance_matrix(d, threshold=delta_t + 0.5)


def ivpp_weight(t1: int, t2: int, delta_t: int = 8) -> float:
    """Temporal sample weight (delta_t - |t2-t1|) / (delta_t + 1)."""
    if delta_t < 0:
        raise ValueError("delta_t must be >= 0")
    return (delta_t - abs(t2 - t1)) / (delta_t + 1)


def distance_ivpp_weight(p1: ProbePose, p2: ProbePose,
                         delta_probe_mm: float = 10.0) -> float:
    """Probe-distance sample weight (delta - ||p2-p1||) / (delta + 1)."""
    if delta_probe_mm < 0:
        raise ValueError("delta_probe_mm must be >= 0")
    return (delta_probe_mm - probe_distance(p1, p2)) / (delta_probe_mm + 1)


def sample_inter_sweep_batch(dataset: list[Sweep], b: int,
                             rng: np.random.Generator):
    """Draw b distinct frames uniformly from the pooled dataset."""
    pool = [(s.id, i) for s in dataset for i in range(len(s))]
    if len(pool) < b:
        raise ValueError(f"dataset holds {len(pool)} frames; need {b}")
    picks = rng.choice(len(pool), size=b, replace=False)
    return [pool[int(k)] for k in picks]
