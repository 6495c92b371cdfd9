"""Run configuration: model variants, network/fusion settings, config files."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .geometry import ValidationError


@dataclass(frozen=True)
class VariantSpec:
    """Which pipeline pieces a named model variant enables."""

    correlation: bool   # averaged group-wise correlation vs 32-ch variance
    inverse_depth: bool  # inverse-depth sampling + ordinal regression vs uniform
    cascade: bool        # two filtering U-Nets vs one


VARIANTS: dict[str, VariantSpec] = {
    "base": VariantSpec(correlation=False, inverse_depth=False, cascade=False),
    "agc": VariantSpec(correlation=True, inverse_depth=False, cascade=False),
    "agc-idr": VariantSpec(correlation=True, inverse_depth=True, cascade=False),
    "cider": VariantSpec(correlation=True, inverse_depth=True, cascade=True),
}


@dataclass
class NetworkConfig:
    """Depth sampling, grouping, loss weights, and the learning-rate schedule."""

    num_depths: int = 32
    groups: int = 8
    loss_weights: tuple[float, ...] = (0.5, 0.5, 0.7)
    learning_rate: float = 1e-3
    lr_decay: float = 0.9
    lr_decay_interval: int = 10_000
    variant: str = "cider"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant '{self.variant}', expected one of {sorted(VARIANTS)}")
        if self.num_depths % 8:
            raise ValidationError(f"depth sample count must be divisible by 8, got {self.num_depths}")
        if 32 % self.groups:
            raise ValidationError(f"group count must divide 32, got {self.groups}")
        if any(w < 0 for w in self.loss_weights):
            raise ValidationError("loss weights must be non-negative")

    @property
    def spec(self) -> VariantSpec:
        return VARIANTS[self.variant]


@dataclass
class FusionConfig:
    """Thresholds for probability filtering and geometric consistency."""

    prob_threshold: float = 0.8
    depth_tolerance: float = 0.01
    reproj_tolerance: float = 1.0
    min_consistent_views: int = 3

    def __post_init__(self):
        if min(self.prob_threshold, self.depth_tolerance, self.reproj_tolerance) <= 0:
            raise ValidationError("fusion thresholds must be positive")
        if self.min_consistent_views < 1:
            raise ValidationError("min_consistent_views must be at least 1")


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse a flat key=value config file ('#' starts a comment)."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value, got '{raw.strip()}'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values
