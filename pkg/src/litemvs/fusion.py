"""Probability filtering and multi-view consistency fusion into a point cloud.

All geometry here runs at depth-map resolution: pass views whose intrinsics
are already scaled to match the depth maps.  Invalid depth pixels carry 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import FusionConfig
from .geometry import CameraView, back_project, relative_pose


@dataclass
class PointCloud:
    """Fused points with colors and per-point supporting-view bookkeeping."""

    xyz: np.ndarray            # (M, 3) float64
    rgb: np.ndarray            # (M, 3) uint8
    support_count: np.ndarray  # (M,) int32, >= min_consistent_views
    support: np.ndarray        # (M, n_views) bool, seeding view included
    seed_view: np.ndarray      # (M,) int32, view whose pixel seeded the point

    def __len__(self) -> int:
        return len(self.xyz)


def confidence_map(prob: np.ndarray, ordinal: np.ndarray) -> np.ndarray:
    """Accumulate probability over the 4 ordinals bracketing each pixel's k.

    The window {floor(k)-1 .. floor(k)+2} is clipped to the volume, so pixels
    regressed near the ends accumulate over fewer ordinals.
    """
    d = prob.shape[0]
    k = np.clip(ordinal, 0.0, d - 1.0)
    j0 = np.floor(k).astype(np.int64)
    conf = np.zeros_like(ordinal, dtype=prob.dtype)
    rows, cols = np.indices(ordinal.shape)
    for offset in (-1, 0, 1, 2):
        j = j0 + offset
        inside = (j >= 0) & (j < d)
        jj = np.clip(j, 0, d - 1)
        conf += np.where(inside, prob[jj, rows, cols], 0.0)
    return np.minimum(conf, 1.0)


def filter_depth(depth: np.ndarray, confidence: np.ndarray, prob_threshold: float) -> np.ndarray:
    """Zero out pixels whose confidence falls below the threshold."""
    if depth.shape != confidence.shape:
        raise ValueError(f"depth {depth.shape} vs confidence {confidence.shape}")
    return np.where(confidence < prob_threshold, 0.0, depth)


def _project_points(points: np.ndarray, view: CameraView):
    """World points (N, 3) -> continuous pixels (N, 2) and camera depth (N,)."""
    x_cam = points @ view.R.T + view.t
    z = x_cam[:, 2]
    proj = x_cam @ view.K.T
    safe = np.where(z > 0, z, 1.0)
    return proj[:, :2] / safe[:, None], z


def _pixel_grid(shape) -> np.ndarray:
    h, w = shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=-1)


def _match_neighbor(ref_view: CameraView, ref_depth: np.ndarray,
                    nb_view: CameraView, nb_depth: np.ndarray, config: FusionConfig):
    """Two-view consistency between every ref pixel and one neighbor.

    Returns:
        consistent: (H*W,) bool mask.
        nb_pix: (H*W,) flat index of the matched (certifying) neighbor pixel.
        nb_points: (H*W, 3) back-projection of the certifying neighbor pixel
            center at its own estimated depth (meaningful where consistent).
    """
    h, w = ref_depth.shape
    pixels = _pixel_grid(ref_depth.shape)
    d = ref_depth.ravel()
    valid = d > 0
    points = back_project(pixels, np.where(valid, d, 1.0), ref_view)
    uv, d_proj = _project_points(points, nb_view)
    ui = np.rint(uv[:, 0]).astype(np.int64)
    vi = np.rint(uv[:, 1]).astype(np.int64)
    in_img = (d_proj > 0) & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    ui = np.clip(ui, 0, w - 1)
    vi = np.clip(vi, 0, h - 1)
    d_est = nb_depth[vi, ui]
    has_depth = in_img & (d_est > 0)
    # round-trip the neighbor's estimate back into the reference
    est_points = back_project(uv, np.where(has_depth, d_est, 1.0), nb_view)
    uv_back, z_back = _project_points(est_points, ref_view)
    reproj_err = np.linalg.norm(uv_back - pixels, axis=1)
    rel_depth = np.abs(d_proj - d_est) / np.where(has_depth, d_est, 1.0)
    consistent = (
        valid & has_depth & (z_back > 0)
        & (rel_depth < config.depth_tolerance)
        & (reproj_err < config.reproj_tolerance)
    )
    # fused points average the certifying pixels' own back-projections
    centers = np.stack([ui.astype(np.float64), vi.astype(np.float64)], axis=-1)
    nb_points = back_project(centers, np.where(has_depth, d_est, 1.0), nb_view)
    return consistent, vi * w + ui, nb_points


def consistency_check(ref_view: CameraView, ref_depth: np.ndarray,
                      neighbors: list[tuple[CameraView, np.ndarray]],
                      config: FusionConfig) -> np.ndarray:
    """Count, per reference pixel, the neighbors passing both thresholds."""
    counts = np.zeros(ref_depth.size, dtype=np.int32)
    for nb_view, nb_depth in neighbors:
        consistent, _, _ = _match_neighbor(ref_view, ref_depth, nb_view, nb_depth, config)
        counts += consistent
    return counts.reshape(ref_depth.shape)


def _pixel_colors(view: CameraView, scale_inv: int, shape) -> np.ndarray:
    """Colors for every depth-map pixel, sampled from the full-res image."""
    h, w = shape
    if view.image is None:
        return np.zeros((h * w, 3))
    ih, iw = view.image.shape[:2]
    ys = np.clip(np.arange(h) * scale_inv, 0, ih - 1)
    xs = np.clip(np.arange(w) * scale_inv, 0, iw - 1)
    return view.image[np.ix_(ys, xs)].reshape(-1, 3)


def fuse(views: list[CameraView], depths: list[np.ndarray], config: FusionConfig,
         scale_inv: int = 4) -> PointCloud:
    """Fuse filtered depth maps into one consistent point cloud.

    Every view acts as reference in turn; a pixel is kept when at least
    ``min_consistent_views`` views agree (the reference itself counts as
    one).  Matched neighbor pixels are consumed so they do not seed
    duplicate points; the surviving 3D points and colors are averaged.

    Args:
        views: views with intrinsics at depth-map scale (full-res images may
            ride along for colors).
        depths: filtered depth maps, 0 marking invalid pixels.
        config: thresholds.
        scale_inv: full-res pixels per depth-map pixel (color lookup).
    """
    n = len(views)
    if n < 3:
        print("fuse: fewer than 3 views, emitting empty cloud")
        return _empty_cloud(n)
    shape = depths[0].shape
    npix = depths[0].size
    consumed = [np.zeros(npix, dtype=bool) for _ in range(n)]
    colors = [_pixel_colors(v, scale_inv, shape) for v in views]
    all_xyz, all_rgb, all_cnt, all_sup, all_seed = [], [], [], [], []
    for r in range(n):
        ref_view, ref_depth = views[r], depths[r]
        if not np.any(ref_depth > 0):
            continue
        pixels = _pixel_grid(shape)
        d = ref_depth.ravel()
        ref_points = back_project(pixels, np.where(d > 0, d, 1.0), ref_view)
        sum_xyz = ref_points.copy()
        sum_rgb = colors[r].copy()
        count = np.ones(npix, dtype=np.int32)
        support = np.zeros((npix, n), dtype=bool)
        support[:, r] = True
        matches = []
        for i in range(n):
            if i == r:
                continue
            consistent, nb_pix, nb_points = _match_neighbor(
                ref_view, ref_depth, views[i], depths[i], config)
            matches.append((i, consistent, nb_pix))
            sum_xyz += np.where(consistent[:, None], nb_points, 0.0)
            sum_rgb += np.where(consistent[:, None], colors[i][nb_pix], 0.0)
            count += consistent
            support[:, i] = consistent
        keep = (d > 0) & (count >= config.min_consistent_views) & ~consumed[r]
        if not np.any(keep):
            continue
        for i, consistent, nb_pix in matches:
            consumed[i][nb_pix[keep & consistent]] = True
        consumed[r][keep.nonzero()[0]] = True
        all_xyz.append(sum_xyz[keep] / count[keep, None])
        all_rgb.append(sum_rgb[keep] / count[keep, None])
        all_cnt.append(count[keep])
        all_sup.append(support[keep])
        all_seed.append(np.full(int(keep.sum()), r, dtype=np.int32))
    if not all_xyz:
        return _empty_cloud(n)
    xyz = np.concatenate(all_xyz)
    rgb = np.clip(np.concatenate(all_rgb) * 255.0, 0, 255).astype(np.uint8)
    return PointCloud(xyz, rgb, np.concatenate(all_cnt).astype(np.int32),
                      np.concatenate(all_sup), np.concatenate(all_seed))


def _empty_cloud(n_views: int) -> PointCloud:
    return PointCloud(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8),
                      np.zeros(0, dtype=np.int32), np.zeros((0, n_views), dtype=bool),
                      np.zeros(0, dtype=np.int32))


def audit_point_cloud(cloud: PointCloud, views: list[CameraView],
                      depths: list[np.ndarray], config: FusionConfig) -> float:
    """Fraction of points passing both thresholds in all their supporting views.

    Mirrors the pairwise check with the fused point standing in for the
    seeding reference pixel: project the point into a supporting view, read
    that view's estimated depth at the landing pixel, require relative depth
    agreement, then round-trip the estimate back into the seeding view and
    require sub-threshold reprojection error there.
    """
    if len(cloud) == 0:
        return 1.0
    ok = np.ones(len(cloud), dtype=bool)
    home_uv = np.zeros((len(cloud), 2))
    for r in range(len(views)):
        sel = cloud.seed_view == r
        if np.any(sel):
            home_uv[sel] = _project_points(cloud.xyz[sel], views[r])[0]
    for v, (view, depth) in enumerate(zip(views, depths)):
        sel = cloud.support[:, v]
        if not np.any(sel):
            continue
        pts = cloud.xyz[sel]
        uv, z = _project_points(pts, view)
        h, w = depth.shape
        ui = np.clip(np.rint(uv[:, 0]).astype(np.int64), 0, w - 1)
        vi = np.clip(np.rint(uv[:, 1]).astype(np.int64), 0, h - 1)
        d_est = depth[vi, ui]
        good = (z > 0) & (d_est > 0)
        rel = np.abs(z - d_est) / np.where(good, d_est, 1.0)
        passed = good & (rel < config.depth_tolerance)
        # reprojection leg, measured in each point's seeding view
        est_points = back_project(uv, np.where(good, d_est, 1.0), view)
        idx = sel.nonzero()[0]
        not_home = cloud.seed_view[idx] != v
        if np.any(not_home):
            sub = idx[not_home]
            reproj = np.full(len(sub), np.inf)
            for r in np.unique(cloud.seed_view[sub]):
                grp = cloud.seed_view[sub] == r
                uv_back, _ = _project_points(est_points[not_home][grp], views[r])
                reproj[grp] = np.linalg.norm(uv_back - home_uv[sub[grp]], axis=1)
            passed_sub = passed[not_home] & (reproj < config.reproj_tolerance)
            ok[sub[~passed_sub]] = False
        at_home = idx[~not_home]
        ok[at_home[~passed[~not_home]]] = False
    return float(ok.mean())
