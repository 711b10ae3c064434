"""Simulated query protocol and retrieval metrics.

Queries are frames sampled from a test sweep, stacked into a mini-volume
of temporal neighbors and passed through a random 3D affine so the
extracted slice can be out of plane. A retrieval counts as a success only
if it was not rejected and the retrieved probe position lies strictly
within the success threshold of the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import Affine3DParams, affine_3d_query, build_mini_volume, sample_affine_3d
from .retrieval import RetrievalResult
from .sweeps import Sweep, probe_distance


@dataclass(frozen=True)
class EvalReport:
    n_queries: int
    success_rate: float
    rejection_rate: float
    mean_probe_distance_mm: float | None
    std_probe_distance_mm: float | None
    records: list[dict] = field(default_factory=list)

    def to_dict(self):
        return {
            "n_queries": self.n_queries,
            "success_rate": self.success_rate,
            "rejection_rate": self.rejection_rate,
            "mean_probe_distance_mm": self.mean_probe_distance_mm,
            "std_probe_distance_mm": self.std_probe_distance_mm,
            "records": self.records,
        }


def simulate_queries(sweep: Sweep, n: int = 50, seed: int = 0,
                     affine: Affine3DParams | None = None,
                     half_width: int = 30,
                     force_identity: bool = False):
    """Sample n frames (without replacement when possible) and synthesize
    out-of-plane query views; returns [(query_image, gt_pose), ...]."""
    rng = np.random.default_rng(seed)
    affine = affine or Affine3DParams()
    replace = len(sweep) < n
    indices = rng.choice(len(sweep), size=n, replace=replace)
    queries = []
    for idx in indices:
        vol = build_mini_volume(sweep, int(idx), half_width=half_width)
        if force_identity:
            image = vol.slices[vol.slices.shape[0] // 2].copy()
        else:
            rot, tr, scale = sample_affine_3d(affine, rng)
            image = affine_3d_query(vol, rot, tr, scale)
        queries.append((image, vol.source_pose))
    return queries


def evaluate(queries, retrieve_fn, success_threshold_mm: float = 15.0) -> EvalReport:
    """Score a query set against any retrieval function.

    Success is counted over all queries (rejection is never a success);
    distance statistics cover only the non-rejected retrievals.
    """
    if not queries:
        raise ValueError("empty query set")
    records = []
    distances = []
    successes = 0
    rejections = 0
    for image, gt_pose in queries:
        result: RetrievalResult = retrieve_fn(image)
        rec = {"gt_pose_mm": list(gt_pose.position), **result.to_dict()}
        if result.matched:
            dist = probe_distance(result.pose, gt_pose)
            rec["probe_distance_mm"] = dist
            distances.append(dist)
            if dist < success_threshold_mm:
                successes += 1
                rec["success"] = True
            else:
                rec["success"] = False
        else:
            rejections += 1
            rec["success"] = False
        records.append(rec)
    n = len(queries)
    return EvalReport(
        n_queries=n,
        success_rate=successes / n,
        rejection_rate=rejections / n,
        mean_probe_distance_mm=float(np.mean(distances)) if distances else None,
        std_probe_distance_mm=float(np.std(distances)) if distances else None,
        records=records,
    )


def merge_reports(reports: list[EvalReport]) -> EvalReport:
    """Pool per-sweep reports into one (query-weighted)."""
    records = [r for rep in reports for r in rep.records]
    distances = [r["probe_distance_mm"] for r in records if "probe_distance_mm" in r]
    n = len(records)
    return EvalReport(
        n_queries=n,
        success_rate=sum(1 for r in records if r["success"]) / n,
        rejection_rate=sum(1 for r in records if r["status"] == "rejected") / n,
        mean_probe_distance_mm=float(np.mean(distances)) if distances else None,
        std_probe_distance_mm=float(np.std(distances)) if distances else None,
        records=records,
    )
