"""Edge reconstruction metrics: accuracy, completeness, precision, recall, F-score."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .curves import arc_length, bbox_of_curves, evaluate
from .errors import EmptyCloud

CSV_FIELDS = ("accuracy", "completeness", "recall", "precision", "fscore", "threshold", "n_curves")


@dataclass
class SampledEdgeCloud:
    points: np.ndarray
    source: str = "predicted"
    sampling_resolution: float = 0.0

    def __len__(self):
        return self.points.shape[0]


@dataclass
class MetricsReport:
    accuracy: float
    completeness: float
    recall: float
    precision: float
    fscore: float
    threshold: float
    n_curves: int = 0
    status: str = "ok"

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("accuracy", "completeness"):
            if not math.isfinite(d[k]):
                d[k] = None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def csv_header(self) -> str:
        return ",".join(CSV_FIELDS + ("status",))

    def csv_row(self) -> str:
        d = self.to_dict()
        vals = ["" if d[k] is None else repr(d[k]) for k in CSV_FIELDS]
        return ",".join(vals + [self.status])


def arclength_parameters(ctrl: np.ndarray, count: int, segments: int = 64) -> np.ndarray:
    """Parameters of ``count`` points equally spaced along the curve (polyline estimate)."""
    t = np.linspace(0.0, 1.0, segments + 1)
    pts = evaluate(ctrl, t)
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    if cum[-1] == 0.0 or count == 1:
        return np.linspace(0.0, 1.0, count)
    return np.interp(np.linspace(0.0, cum[-1], count), cum, t)


def dense_samples(curves, resolution: float) -> np.ndarray:
    """Per-curve samples with ``ceil(length / resolution) + 1`` points, before downsampling."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    chunks = []
    for c in curves:
        ctrl = c.control_points
        length = arc_length(ctrl)
        if length == 0.0:
            chunks.append(ctrl[:1].copy())
            continue
        count = int(math.ceil(length / resolution - 1e-12)) + 1
        chunks.append(evaluate(ctrl, arclength_parameters(ctrl, count)))
    if not chunks:
        return np.zeros((0, 3))
    return np.concatenate(chunks)


def voxel_downsample(points: np.ndarray, resolution: float) -> np.ndarray:
    """Centroid of the points in each occupied voxel, ordered by voxel index."""
    if points.shape[0] == 0:
        return points
    keys = np.floor(points / resolution).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    count = np.bincount(inverse)
    out = np.stack([np.bincount(inverse, weights=points[:, d]) for d in range(3)], axis=1)
    return out / count[:, None]


def sample_curves(curves, resolution: float, source: str = "predicted") -> SampledEdgeCloud:
    pts = voxel_downsample(dense_samples(curves, resolution), resolution)
    return SampledEdgeCloud(pts, source, resolution)


def nearest_distances(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from every query point to its nearest reference point."""
    _, idx = cKDTree(ref).query(query, k=1)
    return np.sqrt(np.sum((query - ref[idx]) ** 2, axis=1))


def chamfer_metrics(pred, truth, tau: float) -> MetricsReport:
    p = pred.points if isinstance(pred, SampledEdgeCloud) else np.asarray(pred, float)
    g = truth.points if isinstance(truth, SampledEdgeCloud) else np.asarray(truth, float)
    if p.shape[0] == 0 or g.shape[0] == 0:
        raise EmptyCloud("both point clouds must be non-empty")
    d_pred = nearest_distances(p, g)
    d_gt = nearest_distances(g, p)
    precision = 100.0 * float(np.mean(d_pred <= tau))
    recall = 100.0 * float(np.mean(d_gt <= tau))
    fscore = 2 * precision * recall / (precision + recall) if precision > 0 and recall > 0 else 0.0
    return MetricsReport(float(d_pred.mean()), float(d_gt.mean()), recall, precision, fscore, float(tau))


def default_thresholds(gt_curves) -> tuple[float, float]:
    """(tau, resolution) = (0.01, 0.005) x ground-truth bounding-box diagonal."""
    box = bbox_of_curves(gt_curves)
    diag = float(np.linalg.norm(box[1] - box[0]))
    return 0.01 * diag, 0.005 * diag


def evaluate_run(final, gt_curves, tau: float | None = None, resolution: float | None = None) -> MetricsReport:
    final, gt_curves = list(final), list(gt_curves)
    d_tau, d_res = default_thresholds(gt_curves)
    tau = d_tau if tau is None else tau
    resolution = d_res if resolution is None else resolution
    truth = sample_curves(gt_curves, resolution, "ground_truth")
    pred = sample_curves(final, resolution, "predicted")
    try:
        report = chamfer_metrics(pred, truth, tau)
    except EmptyCloud as exc:
        report = MetricsReport(math.nan, math.nan, 0.0, 0.0, 0.0, float(tau), status=f"failed: {exc}")
    report.n_curves = len(final)
    return report
