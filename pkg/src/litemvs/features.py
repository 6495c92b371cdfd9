"""Weight-sharing 2D feature CNN: 3 x H x W image -> 32 x H/4 x W/4 feature."""

from __future__ import annotations

import numpy as np

from .layers import Conv2dLayer
from .tensor import ShapeError, Tensor

# (in_ch, out_ch, kernel, stride); the final layer carries no BN or ReLU so
# its activations stay unbounded in sign.
_LAYER_PLAN = [
    (3, 8, 3, 1),
    (8, 8, 3, 1),
    (8, 16, 5, 2),
    (16, 16, 3, 1),
    (16, 16, 3, 1),
    (16, 32, 5, 2),
    (32, 32, 3, 1),
    (32, 32, 3, 1),
]


class FeatureExtractor:
    """Eight-layer CNN applied with shared weights to every input view."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.layers = []
        for i, (c_in, c_out, k, s) in enumerate(_LAYER_PLAN):
            last = i == len(_LAYER_PLAN) - 1
            self.layers.append(
                Conv2dLayer(c_in, c_out, k, s, rng, bn=not last, act=not last, dtype=dtype)
            )

    def extract(self, image: Tensor, training: bool = False) -> Tensor:
        """Map a (3, H, W) image to its (32, H/4, W/4) deep feature."""
        _, h, w = image.shape
        if h % 32 or w % 32:
            raise ShapeError(f"image extents must be divisible by 32, got {h}x{w}")
        x = image
        for layer in self.layers:
            x = layer(x, training)
        return x

    def output_shapes(self, in_shape) -> list[tuple[int, ...]]:
        """Per-layer output shapes for a (3, H, W) input."""
        shapes = []
        shape = tuple(in_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes

    def named_parameters(self, prefix: str = "feature"):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.l{i + 1}")

    def named_buffers(self, prefix: str = "feature"):
        for i, layer in enumerate(self.layers):
            yield from layer.named_buffers(f"{prefix}.l{i + 1}")
