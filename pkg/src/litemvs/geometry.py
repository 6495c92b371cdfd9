"""Camera model, depth-hypothesis projection, and inverse-depth sampling.

Conventions: x_cam = R @ x_world + t, pixel p = (u, v, 1) with integer pixel
centers, K upper-triangular.  Hypothesis ordinal 0 maps to d_max and ordinal
D-1 to d_min (far to near), matching the inverse-depth sampling formula.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# out-of-range regressed ordinals are clamped; this counts how often
CLAMP_COUNTER = {"count": 0}


class ValidationError(ValueError):
    """Invalid camera, range, or configuration input."""


@dataclass
class CameraView:
    """One calibrated input view.

    Attributes:
        K: 3x3 intrinsics in pixels.
        R: 3x3 world-to-camera rotation.
        t: 3-vector translation (x_cam = R @ x_world + t).
        d_min / d_max: scene depth range along the camera z axis.
        image: optional H x W x 3 float image in [0, 1].
    """

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    d_min: float
    d_max: float
    image: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self) -> None:
        if np.max(np.abs(self.R.T @ self.R - np.eye(3))) > 1e-6:
            raise ValidationError("rotation is not orthonormal")
        if np.linalg.det(self.R) < 0:
            raise ValidationError("rotation has negative determinant")
        if self.K[1, 0] != 0 or self.K[2, 0] != 0 or self.K[2, 1] != 0:
            raise ValidationError("intrinsics must be upper-triangular")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 < self.d_min < self.d_max):
            raise ValidationError(f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def scaled(self, scale: float) -> "CameraView":
        """Copy of this view with intrinsics (and image, if any) at ``scale``."""
        K = self.K.copy()
        K[0, :] *= scale
        K[1, :] *= scale
        return CameraView(K, self.R, self.t, self.d_min, self.d_max, image=self.image, name=self.name)


def relative_pose(ref: CameraView, src: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """(R, t) mapping reference-camera coordinates into source-camera ones."""
    R = src.R @ ref.R.T
    t = src.t - R @ ref.t
    return R, t


def project(p: np.ndarray, depth, ref: CameraView, src: CameraView):
    """Project reference pixels at given depths into the source image.

    Args:
        p: (..., 2) pixel coordinates in the reference image.
        depth: scalar or broadcastable depths along the reference z axis.
        ref, src: the two views.

    Returns:
        (uv, z): continuous source-pixel coordinates (..., 2) and the source
        depth z (...); z <= 0 marks points behind the source camera (uv is
        not meaningful there).
    """
    p = np.asarray(p, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    R, t = relative_pose(ref, src)
    ph = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)
    rays = ph @ np.linalg.inv(ref.K).T
    x_src = (rays * depth[..., None]) @ R.T + t
    proj = x_src @ src.K.T
    z = proj[..., 2]
    safe = np.where(z > 0, z, 1.0)
    uv = proj[..., :2] / safe[..., None]
    return uv, z


def back_project(uv: np.ndarray, depth, view: CameraView) -> np.ndarray:
    """Lift pixels (..., 2) at camera depths to world points (..., 3)."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    ph = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
    x_cam = (ph @ np.linalg.inv(view.K).T) * depth[..., None]
    return (x_cam - view.t) @ view.R


@dataclass
class DepthHypothesisSet:
    """Depth samples placed uniformly in inverse depth (far to near)."""

    d_min: float
    d_max: float
    count: int
    kind: str = field(default="inverse", init=False)

    def __post_init__(self):
        if self.count < 2:
            raise ValidationError(f"need at least 2 depth samples, got {self.count}")
        if not (0 < self.d_min < self.d_max):
            raise ValidationError(f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")
        self.values = self.depth_at(np.arange(self.count, dtype=np.float64))

    def depth_at(self, k):
        """Depth for continuous ordinal(s) k in [0, count-1]; endpoints exact."""
        k = np.asarray(k, dtype=np.float64)
        t = k / (self.count - 1)
        inv = (1.0 - t) / self.d_max + t / self.d_min
        d = 1.0 / inv
        d = np.where(t == 0.0, self.d_max, d)
        d = np.where(t == 1.0, self.d_min, d)
        return d if d.ndim else float(d)

    def ordinal_of(self, d):
        """Continuous ordinal whose depth is d (inverse of :meth:`depth_at`)."""
        d = np.asarray(d, dtype=np.float64)
        t = (1.0 / d - 1.0 / self.d_max) / (1.0 / self.d_min - 1.0 / self.d_max)
        return t * (self.count - 1)

    def regression_coeffs(self) -> tuple[float, float]:
        """(a, b) such that depth(k) = 1 / (a*k + b)."""
        a = (1.0 / self.d_min - 1.0 / self.d_max) / (self.count - 1)
        return a, 1.0 / self.d_max


@dataclass
class UniformDepthHypothesisSet:
    """Ablation baseline: depth samples placed uniformly in depth (far to near)."""

    d_min: float
    d_max: float
    count: int
    kind: str = field(default="uniform", init=False)

    def __post_init__(self):
        if self.count < 2:
            raise ValidationError(f"need at least 2 depth samples, got {self.count}")
        if not (0 < self.d_min < self.d_max):
            raise ValidationError(f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")
        self.values = self.depth_at(np.arange(self.count, dtype=np.float64))

    def depth_at(self, k):
        k = np.asarray(k, dtype=np.float64)
        t = k / (self.count - 1)
        d = (1.0 - t) * self.d_max + t * self.d_min
        return d if d.ndim else float(d)

    def ordinal_of(self, d):
        d = np.asarray(d, dtype=np.float64)
        return (self.d_max - d) / (self.d_max - self.d_min) * (self.count - 1)

    def regression_coeffs(self) -> tuple[float, float]:
        """(a, b) such that depth(k) = a*k + b."""
        return (self.d_min - self.d_max) / (self.count - 1), self.d_max


def sample_inverse_depths(d_min: float, d_max: float, count: int) -> DepthHypothesisSet:
    """Hypotheses spaced uniformly in 1/d; d_0 = d_max, d_{D-1} = d_min."""
    return DepthHypothesisSet(d_min, d_max, count)


def sample_uniform_depths(d_min: float, d_max: float, count: int) -> UniformDepthHypothesisSet:
    return UniformDepthHypothesisSet(d_min, d_max, count)


def ordinal_to_depth(k, d_min: float, d_max: float, count: int):
    """Convert continuous ordinals to depths, clamping out-of-range inputs."""
    hyp = DepthHypothesisSet(d_min, d_max, count)
    k = np.asarray(k, dtype=np.float64)
    out_of_range = (k < 0) | (k > count - 1)
    n_clamped = int(np.count_nonzero(out_of_range))
    if n_clamped:
        CLAMP_COUNTER["count"] += n_clamped
        k = np.clip(k, 0.0, count - 1.0)
    d = hyp.depth_at(k)
    return d


def depth_to_ordinal(d, d_min: float, d_max: float, count: int):
    return DepthHypothesisSet(d_min, d_max, count).ordinal_of(d)


# -- camera text files -------------------------------------------------------
#
# Layout: "extrinsic", 4 rows of [R|t; 0 0 0 1], "intrinsic", 3 rows of K,
# then "d_min d_max D".  Whitespace separated.


def save_camera_file(path: str | Path, view: CameraView, num_depths: int) -> None:
    lines = ["extrinsic"]
    E = np.eye(4)
    E[:3, :3] = view.R
    E[:3, 3] = view.t
    for row in E:
        lines.append(" ".join(repr(float(v)) for v in row))
    lines.append("intrinsic")
    for row in view.K:
        lines.append(" ".join(repr(float(v)) for v in row))
    lines.append(f"{view.d_min!r} {view.d_max!r} {num_depths}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_camera_file(path: str | Path) -> tuple[CameraView, int]:
    """Parse a camera text file; returns the view and its depth sample count."""
    tokens = Path(path).read_text().split()
    try:
        i = tokens.index("extrinsic")
        ext = np.array([float(v) for v in tokens[i + 1:i + 17]]).reshape(4, 4)
        j = tokens.index("intrinsic")
        K = np.array([float(v) for v in tokens[j + 1:j + 10]]).reshape(3, 3)
        d_min, d_max, num_depths = tokens[j + 10:j + 13]
    except (ValueError, IndexError) as exc:
        raise ValidationError(f"{path}: malformed camera file ({exc})") from exc
    view = CameraView(K, ext[:3, :3], ext[:3, 3], float(d_min), float(d_max),
                      name=Path(path).stem)
    return view, int(num_depths)
