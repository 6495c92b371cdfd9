"""Cost-volume filtering network, depth regression, and the training loss.

Filtering runs a residual pre-filter block, then one or two hourglass
(encoder-decoder) 3D U-Nets with additive skips.  Each tapped stage feeds a
1-channel regression conv; depths are regressed from softmax probabilities
via the expected ordinal.
"""

from __future__ import annotations

import numpy as np

from .config import NetworkConfig
from .cost_volume import FEATURE_CHANNELS, build_cost_volume
from .features import FeatureExtractor
from .geometry import CameraView, sample_inverse_depths, sample_uniform_depths
from .layers import Conv3dLayer, Deconv3dLayer
from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    mean_abs_diff,
    no_grad,
    softmax,
    tensor_sum,
)

FEATURE_SCALE = 0.25


class Hourglass3d:
    """Three stride-2 3D convs down, three transposed convs up, additive skips."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.down1 = Conv3dLayer(8, 16, 3, 2, rng, dtype=dtype)
        self.down2 = Conv3dLayer(16, 32, 3, 2, rng, dtype=dtype)
        self.down3 = Conv3dLayer(32, 64, 3, 2, rng, dtype=dtype)
        self.up1 = Deconv3dLayer(64, 32, 3, 2, rng, dtype=dtype)
        self.up2 = Deconv3dLayer(32, 16, 3, 2, rng, dtype=dtype)
        self.up3 = Deconv3dLayer(16, 8, 3, 2, rng, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        d1 = self.down1(x, training)
        d2 = self.down2(d1, training)
        d3 = self.down3(d2, training)
        u1 = self.up1(d3, training) + d2
        u2 = self.up2(u1, training) + d1
        return self.up3(u2, training) + x

    def trace(self, in_shape) -> list[tuple[int, ...]]:
        shapes = []
        shape = tuple(in_shape)
        for layer in (self.down1, self.down2, self.down3):
            shape = layer.output_shape(shape)
            shapes.append(shape)
        for layer in (self.up1, self.up2, self.up3):
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes

    def named_parameters(self, prefix: str):
        for name in ("down1", "down2", "down3", "up1", "up2", "up3"):
            yield from getattr(self, name).named_parameters(f"{prefix}.{name}")

    def named_buffers(self, prefix: str):
        for name in ("down1", "down2", "down3", "up1", "up2", "up3"):
            yield from getattr(self, name).named_buffers(f"{prefix}.{name}")


class CostFilterNet:
    """Residual pre-filter block plus the hourglass cascade and branch taps."""

    def __init__(self, in_channels: int, cascade: bool, rng: np.random.Generator, dtype=np.float32):
        self.in_channels = in_channels
        self.cascade = cascade
        self.pre1 = Conv3dLayer(in_channels, 8, 3, 1, rng, dtype=dtype)
        self.pre2 = Conv3dLayer(8, 8, 3, 1, rng, dtype=dtype)
        self.pre3 = Conv3dLayer(8, 8, 3, 1, rng, dtype=dtype)
        self.pre4 = Conv3dLayer(8, 8, 3, 1, rng, act=False, dtype=dtype)  # BN, no ReLU
        self.unets = [Hourglass3d(rng, dtype)]
        if cascade:
            self.unets.append(Hourglass3d(rng, dtype))
        n_branches = 3 if cascade else 1
        self.branches = [
            Conv3dLayer(8, 1, 3, 1, rng, bn=False, act=False, dtype=dtype)
            for _ in range(n_branches)
        ]

    def __call__(self, volume: Tensor, training: bool = False) -> list[Tensor]:
        """Filter a (C, D, H', W') volume into one 1-channel volume per branch."""
        if volume.shape[0] != self.in_channels:
            raise ShapeError(f"volume has {volume.shape[0]} channels, expected {self.in_channels}")
        if volume.shape[1] % 8:
            raise ShapeError(f"depth extent must be divisible by 8, got {volume.shape[1]}")
        x = self.pre1(volume, training)
        x2 = self.pre2(x, training)
        x = self.pre3(x2, training)
        res = self.pre4(x, training) + x2
        taps = [res]
        h = res
        for unet in self.unets:
            h = unet(h, training)
            taps.append(h)
        if not self.cascade:
            taps = [taps[-1]]
        return [branch(tap, training) for branch, tap in zip(self.branches, taps)]

    def trace(self, vol_shape) -> dict[int, tuple[int, ...]]:
        """Row-indexed output shapes (rows 9 onward of the layer table)."""
        rows: dict[int, tuple[int, ...]] = {}
        shape = tuple(vol_shape)
        for i, layer in enumerate((self.pre1, self.pre2, self.pre3, self.pre4)):
            shape = layer.output_shape(shape)
            rows[9 + i] = shape
        row = 13
        for unet in self.unets:
            for s in unet.trace(shape):
                rows[row] = s
                row += 1
        branch_rows = (25, 26, 27) if self.cascade else (25,)
        tap_shapes = [rows[12], rows[18], rows.get(24)] if self.cascade else [rows[18]]
        for r, tap in zip(branch_rows, tap_shapes):
            rows[r] = self.branches[0].output_shape(tap)
        return rows

    def named_parameters(self, prefix: str = "filter"):
        for i, layer in enumerate((self.pre1, self.pre2, self.pre3, self.pre4)):
            yield from layer.named_parameters(f"{prefix}.pre{i + 1}")
        for i, unet in enumerate(self.unets):
            yield from unet.named_parameters(f"{prefix}.unet{i + 1}")
        for i, branch in enumerate(self.branches):
            yield from branch.named_parameters(f"{prefix}.branch{i + 1}")

    def named_buffers(self, prefix: str = "filter"):
        for i, layer in enumerate((self.pre1, self.pre2, self.pre3, self.pre4)):
            yield from layer.named_buffers(f"{prefix}.pre{i + 1}")
        for i, unet in enumerate(self.unets):
            yield from unet.named_buffers(f"{prefix}.unet{i + 1}")


def regress(branch_volume: Tensor, hypotheses) -> tuple[Tensor, Tensor, Tensor]:
    """Softmax over depth, expected ordinal, and the regressed depth map.

    Args:
        branch_volume: (1, D, H', W') filtered volume.
        hypotheses: a depth hypothesis set providing ``regression_coeffs``.

    Returns:
        (prob, k, depth): probabilities (D, H', W'), continuous ordinals
        (H', W'), and per-pixel depths (H', W'), all differentiable.
    """
    if branch_volume.shape[0] != 1:
        raise ShapeError(f"branch volume must have one channel, got {branch_volume.shape}")
    d = branch_volume.shape[1]
    logits = branch_volume.reshape(branch_volume.shape[1:])
    prob = softmax(logits, axis=0)
    ordinals = np.arange(d, dtype=branch_volume.dtype).reshape(d, 1, 1)
    k = tensor_sum(prob * Tensor(ordinals), axis=0)
    a, b = hypotheses.regression_coeffs()
    if hypotheses.kind == "inverse":
        depth = (k * a + b) ** -1.0
    else:
        depth = k * a + b
    return prob, k, depth


def depth_loss(branch_depths: list[Tensor], gt_depth: np.ndarray, valid_mask: np.ndarray,
               weights) -> tuple[Tensor, list[float]]:
    """Weighted sum of per-branch mean absolute errors over valid pixels."""
    if len(branch_depths) != len(weights):
        raise ShapeError(f"{len(branch_depths)} branches but {len(weights)} loss weights")
    gt = Tensor(np.asarray(gt_depth, dtype=branch_depths[0].dtype))
    total = None
    per_branch = []
    for pred, w in zip(branch_depths, weights):
        l1 = mean_abs_diff(pred, gt, mask=valid_mask)
        per_branch.append(float(l1.data))
        term = l1 * float(w)
        total = term if total is None else total + term
    return total, per_branch


class DepthNetwork:
    """End-to-end depth inference model for one reference view plus sources."""

    def __init__(self, config: NetworkConfig, rng: np.random.Generator | int = 0, dtype=np.float32):
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        self.config = config
        self.dtype = dtype
        spec = config.spec
        self.feature = FeatureExtractor(rng, dtype=dtype)
        in_ch = config.groups if spec.correlation else FEATURE_CHANNELS
        self.filter = CostFilterNet(in_ch, cascade=spec.cascade, rng=rng, dtype=dtype)
        # image normalization, computed over the training set
        self.norm_mean = np.zeros(3, dtype=dtype)
        self.norm_std = np.ones(3, dtype=dtype)

    @property
    def loss_weights(self) -> tuple[float, ...]:
        if self.config.spec.cascade:
            return tuple(self.config.loss_weights)
        return (1.0,)

    def set_normalization(self, mean, std) -> None:
        self.norm_mean = np.asarray(mean, dtype=self.dtype).reshape(3)
        self.norm_std = np.asarray(std, dtype=self.dtype).reshape(3)

    def prepare_image(self, image: np.ndarray) -> Tensor:
        """HxWx3 image in [0,1] -> normalized (3, H, W) tensor."""
        arr = np.transpose(np.asarray(image, dtype=self.dtype), (2, 0, 1))
        arr = (arr - self.norm_mean[:, None, None]) / self.norm_std[:, None, None]
        return Tensor(arr)

    def hypotheses(self, d_min: float, d_max: float):
        if self.config.spec.inverse_depth:
            return sample_inverse_depths(d_min, d_max, self.config.num_depths)
        return sample_uniform_depths(d_min, d_max, self.config.num_depths)

    def forward(self, views: list[CameraView], training: bool = False):
        """Run the pipeline for views[0] as reference.

        Returns:
            (branches, hypotheses) where branches is a list of
            (prob, ordinal, depth) tensor triples, final branch last.
        """
        if len(views) < 2:
            raise ShapeError("need a reference view and at least one source view")
        ref, srcs = views[0], views[1:]
        feats = [self.feature.extract(self.prepare_image(v.image), training) for v in views]
        hyp = self.hypotheses(ref.d_min, ref.d_max)
        ref_scaled = ref.scaled(FEATURE_SCALE)
        src_scaled = [v.scaled(FEATURE_SCALE) for v in srcs]
        volume = build_cost_volume(
            feats[0], feats[1:], ref_scaled, src_scaled, hyp.values,
            groups=self.config.groups, correlation=self.config.spec.correlation,
        )
        branch_volumes = self.filter(volume, training)
        branches = [regress(bv, hyp) for bv in branch_volumes]
        return branches, hyp

    def infer(self, views: list[CameraView]):
        """Inference-mode forward; returns final-branch numpy maps.

        Returns:
            dict with ``depth`` (H', W'), ``prob`` (D, H', W'), ``ordinal``
            (H', W') from the final branch.
        """
        with no_grad():
            branches, _ = self.forward(views, training=False)
        prob, k, depth = branches[-1]
        for name, arr in (("prob", prob.data), ("depth", depth.data)):
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite {name} map during inference")
        return {"depth": depth.data, "prob": prob.data, "ordinal": k.data}

    def layer_trace(self, height: int, width: int, num_depths: int | None = None):
        """Row-indexed shape trace of the whole network for an H x W input."""
        d = num_depths or self.config.num_depths
        rows: dict[int | str, tuple[int, ...]] = {}
        feat_shapes = self.feature.output_shapes((3, height, width))
        for i, s in enumerate(feat_shapes):
            rows[i + 1] = s
        vol_shape = (self.filter.in_channels, d, feat_shapes[-1][1], feat_shapes[-1][2])
        rows["volume"] = vol_shape
        rows.update(self.filter.trace(vol_shape))
        return rows

    def named_parameters(self):
        yield from self.feature.named_parameters("feature")
        yield from self.filter.named_parameters("filter")

    def named_buffers(self):
        yield from self.feature.named_buffers("feature")
        yield from self.filter.named_buffers("filter")
        yield "norm.mean", self.norm_mean
        yield "norm.std", self.norm_std

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{k}": t.data for k, t in self.named_parameters()}
        state.update({f"buffer/{k}": b for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for key, arr in state.items():
            kind, _, name = key.partition("/")
            if kind == "param":
                if name not in params:
                    raise KeyError(f"unexpected parameter '{name}' in checkpoint")
                params[name].data = arr.astype(self.dtype)
            elif kind == "buffer":
                if name == "norm.mean":
                    self.norm_mean = arr.astype(self.dtype)
                elif name == "norm.std":
                    self.norm_std = arr.astype(self.dtype)
                elif name in buffers:
                    buffers[name][...] = arr
                else:
                    raise KeyError(f"unexpected buffer '{name}' in checkpoint")
