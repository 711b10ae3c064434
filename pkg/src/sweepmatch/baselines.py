"""Comparison baselines: normalized cross-correlation retrieval and the
(sampler, loss, weighting) wiring for the alternative training modes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .retrieval import RetrievalResult
from .sweeps import Sweep

BASELINE_KINDS = ("ncc", "inter_sweep_cl", "ivpp", "distance_ivpp", "ours")


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalized cross-correlation in [-1, 1].

    Defined as 0 when either image is constant, so the function is total.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        return 0.0
    return float(np.clip((da * db).sum() / denom, -1.0, 1.0))


def ncc_retrieve(database: Sweep, query_image: np.ndarray) -> RetrievalResult:
    """Argmax NCC over the database frames; never rejects. Ties break to
    the lower frame index."""
    if len(database) == 0:
        raise ValueError("empty database sweep")
    scores = np.array([ncc(f.image, query_image) for f in database.frames])
    best = int(np.argmax(scores))
    runner_up = float(np.partition(scores, -2)[-2]) if len(scores) > 1 else float("-inf")
    frame = database.frames[best]
    return RetrievalResult(status="matched", score=float(scores[best]),
                           runner_up_score=runner_up,
                           frame_index=frame.frame_index, pose=frame.pose)


@dataclass(frozen=True)
class TrainingMode:
    """How one baseline samples batches, labels pairs and weights the loss."""

    kind: str
    sampler: str       # "dual" | "pooled" | "none"
    labels: str        # "probe" | "same-frame" | "temporal" | "none"
    loss: str          # "sce" | "sce+triplet" | "none"
    weighting: str     # "none" | "ivpp" | "distance-ivpp"

    @property
    def trainable(self) -> bool:
        return self.loss != "none"

    @property
    def ablation_mode(self) -> str:
        return "full" if self.loss == "sce+triplet" else "p1" if self.labels == "probe" else "sce"


def make_training_mode(kind: str) -> TrainingMode:
    """Map a baseline name to its training configuration."""
    modes = {
        "ncc": TrainingMode("ncc", "none", "none", "none", "none"),
        "inter_sweep_cl": TrainingMode("inter_sweep_cl", "pooled", "same-frame",
                                       "sce", "none"),
        "ivpp": TrainingMode("ivpp", "dual", "temporal", "sce", "ivpp"),
        "distance_ivpp": TrainingMode("distance_ivpp", "dual", "probe", "sce",
                                      "distance-ivpp"),
        "ours": TrainingMode("ours", "dual", "probe", "sce+triplet", "none"),
    }
    if kind not in modes:
        raise ValueError(f"unknown baseline kind {kind!r}; choose from {BASELINE_KINDS}")
    return modes[kind]
