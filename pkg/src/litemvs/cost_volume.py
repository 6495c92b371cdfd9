"""Differentiable feature warping and cost-volume construction.

The main volume is the averaged group-wise correlation (G channels, G=8 by
default); the 32-channel variance volume is kept as the ablation baseline.
Feature-scale intrinsics are the full-resolution ones scaled by 1/4.
"""

from __future__ import annotations

import tracemalloc

import numpy as np

from .geometry import CameraView, project
from .tensor import ShapeError, Tensor, _accumulate, _result, bilinear_gather, no_grad

FEATURE_SCALE = 0.25
FEATURE_CHANNELS = 32


def warp_coordinates(ref: CameraView, src: CameraView, depths: np.ndarray, height: int, width: int):
    """Bilinear sampling plan for warping a source feature to reference geometry.

    Args:
        ref, src: views with intrinsics already at feature scale.
        depths: (D,) depth hypotheses.
        height, width: feature-map extents.

    Returns:
        (indices, weights): (4, D*height*width) flat tap indices and weights.
        Samples behind the source camera or outside the image get zero weights.
    """
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=-1)  # (N, 2) as (u, v)
    uv, z = project(pixels[None, :, :], depths[:, None], ref, src)  # (D, N, 2), (D, N)
    u = uv[..., 0].ravel()
    v = uv[..., 1].ravel()
    # snap float dust so integer-coordinate warps (e.g. identity pose) are exact
    u = np.where(np.abs(u - np.rint(u)) < 1e-9, np.rint(u), u)
    v = np.where(np.abs(v - np.rint(v)) < 1e-9, np.rint(v), v)
    valid = (z.ravel() > 1e-9) & (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
    u = np.clip(np.where(valid, u, 0.0), 0, width - 1)
    v = np.clip(np.where(valid, v, 0.0), 0, height - 1)
    x0 = np.clip(np.floor(u).astype(np.int64), 0, max(width - 2, 0))
    y0 = np.clip(np.floor(v).astype(np.int64), 0, max(height - 2, 0))
    fx = u - x0
    fy = v - y0
    indices = np.stack([
        y0 * width + x0,
        y0 * width + x0 + 1,
        (y0 + 1) * width + x0,
        (y0 + 1) * width + x0 + 1,
    ])
    weights = np.stack([
        (1 - fy) * (1 - fx),
        (1 - fy) * fx,
        fy * (1 - fx),
        fy * fx,
    ])
    weights *= valid
    return indices, weights


def warp(src_feature: Tensor, ref: CameraView, src: CameraView, depths: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Warp a (C, H, W) source feature to every depth hypothesis.

    Returns:
        (warped, mask): a (C, D, H, W) tensor and a (D, H, W) validity mask.
        Invalid cells hold zero feature; gradients flow to the source feature
        through the fixed bilinear taps.
    """
    c, h, w = src_feature.shape
    d = len(depths)
    indices, weights = warp_coordinates(ref, src, np.asarray(depths, dtype=np.float64), h, w)
    gathered = bilinear_gather(src_feature, indices, weights)  # (C, D*H*W)
    mask = weights.sum(axis=0).reshape(d, h, w) > 0
    return gathered.reshape((c, d, h, w)), mask


def group_correlation(ref_feature: Tensor, warped: Tensor, groups: int) -> Tensor:
    """Per-source similarity volume: G-channel group-wise inner products.

    Each of the G groups holds C/G channels; the similarity is the inner
    product over the group divided by the group size, computed between the
    reference feature and the warped source feature at every depth.
    """
    c, h, w = ref_feature.shape
    if c % groups:
        raise ShapeError(f"{groups} groups do not divide {c} channels")
    if warped.shape[0] != c or warped.shape[2:] != (h, w):
        raise ShapeError(f"warped shape {warped.shape} does not match feature {ref_feature.shape}")
    d = warped.shape[1]
    gsize = c // groups
    rg = ref_feature.data.reshape(groups, gsize, h * w)
    wg = warped.data.reshape(groups, gsize, d, h * w)
    vol = np.einsum("gcn,gcdn->gdn", rg, wg) / gsize
    out = _result(vol.reshape(groups, d, h, w), (ref_feature, warped))
    if out.requires_grad:
        def _bw():
            gy = out.grad.reshape(groups, 1, d, h * w) / gsize
            if warped.requires_grad:
                _accumulate(warped, (gy * rg[:, :, None, :]).reshape(warped.shape))
            if ref_feature.requires_grad:
                _accumulate(ref_feature, np.einsum("gzdn,gcdn->gcn", gy, wg).reshape(c, h, w))
        out._backward = _bw
    return out


def average_volumes(volumes: list[Tensor]) -> Tensor:
    """Elementwise mean of the per-source volumes (fixed summation order)."""
    if not volumes:
        raise ShapeError("average_volumes needs at least one source volume")
    for v in volumes[1:]:
        if v.shape != volumes[0].shape:
            raise ShapeError("per-source volumes must share a shape")
    acc = volumes[0]
    for v in volumes[1:]:
        acc = acc + v
    return acc * (1.0 / len(volumes))


def variance_volume(ref_feature: Tensor, warped_list: list[Tensor]) -> Tensor:
    """Baseline 32-channel volume: population variance across all views.

    The reference feature (constant across depth) counts as one view
    alongside every warped source; invalid warp cells contribute their
    zero fill, mirroring the unconditional average of the main volume.
    """
    if not warped_list:
        raise ShapeError("variance_volume needs at least one warped source")
    c, h, w = ref_feature.shape
    d = warped_list[0].shape[1]
    n = len(warped_list) + 1
    ref_b = ref_feature.reshape((c, 1, h, w))
    total = ref_b
    total_sq = ref_b * ref_b
    for wv in warped_list:
        total = total + wv
        total_sq = total_sq + wv * wv
    mean = total * (1.0 / n)
    mean_sq = total_sq * (1.0 / n)
    var = mean_sq - mean * mean
    if var.shape != (c, d, h, w):
        raise ShapeError(f"variance volume shape {var.shape}, expected {(c, d, h, w)}")
    return var


def build_cost_volume(
    ref_feature: Tensor,
    src_features: list[Tensor],
    ref_view: CameraView,
    src_views: list[CameraView],
    depths: np.ndarray,
    groups: int,
    correlation: bool = True,
) -> Tensor:
    """Warp every source and reduce to the multi-view cost volume.

    ``correlation=True`` produces the averaged G-channel correlation volume;
    ``False`` the 32-channel variance baseline.  Views must carry intrinsics
    at feature scale.
    """
    if not src_features:
        raise ShapeError("need at least one source view")
    if correlation:
        acc = None
        for feat, view in zip(src_features, src_views):
            warped, _ = warp(feat, ref_view, view, depths)
            vol = group_correlation(ref_feature, warped, groups)
            acc = vol if acc is None else acc + vol
        return acc * (1.0 / len(src_features))
    warped_list = [warp(feat, ref_view, view, depths)[0] for feat, view in zip(src_features, src_views)]
    return variance_volume(ref_feature, warped_list)


def measure_peak_bytes(fn) -> tuple[object, int]:
    """Run ``fn`` and report its peak traced allocation in bytes."""
    tracemalloc.start()
    tracemalloc.reset_peak()
    try:
        with no_grad():
            result = fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return result, peak
