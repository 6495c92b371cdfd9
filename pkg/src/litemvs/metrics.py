"""Point-cloud and depth-map evaluation metrics."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def point_cloud_metrics(recon: np.ndarray, gt: np.ndarray, threshold: float) -> dict[str, float]:
    """Distance and percentage metrics between a reconstruction and GT samples.

    Accuracy is the mean distance from reconstructed points to their nearest
    GT point; completeness the reverse; overall their mean.  Precision/recall
    count points within ``threshold`` of the other cloud, and F1 is their
    harmonic mean.
    """
    if len(recon) == 0 or len(gt) == 0:
        raise ValueError("point_cloud_metrics: empty cloud")
    d_recon = cKDTree(gt).query(recon, k=1)[0]
    d_gt = cKDTree(recon).query(gt, k=1)[0]
    accuracy = float(d_recon.mean())
    completeness = float(d_gt.mean())
    precision = float((d_recon <= threshold).mean())
    recall = float((d_gt <= threshold).mean())
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return {
        "accuracy": accuracy,
        "completeness": completeness,
        "overall": 0.5 * (accuracy + completeness),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "threshold": threshold,
    }


def depth_map_metrics(pred: np.ndarray, gt: np.ndarray,
                      inlier_thresholds=(0.01, 0.02, 0.05)) -> dict[str, float]:
    """MAE plus relative-error inlier ratios over pixels valid in both maps."""
    valid = (gt > 0) & (pred > 0)
    if not np.any(valid):
        raise ValueError("depth_map_metrics: no commonly valid pixels")
    err = np.abs(pred[valid] - gt[valid])
    rel = err / gt[valid]
    out = {"mae": float(err.mean()), "valid_fraction": float(valid.mean())}
    for thr in inlier_thresholds:
        out[f"inlier_{thr:g}"] = float((rel < thr).mean())
    return out


def scene_diagonal(points: np.ndarray) -> float:
    """Diagonal of the axis-aligned bounding box of a point set."""
    if len(points) == 0:
        return 0.0
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
