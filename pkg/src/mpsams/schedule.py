"""Adaptive masking ratio: sigma = sigma0 + ln(epoch) / tau, and n = floor(N * sigma)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal


@dataclass(frozen=True)
class ScheduleParams:
    sigma0: float = 0.25
    tau: float = 12.0
    sigma_max: float = 0.95
    mode: Literal["adaptive", "fixed"] = "adaptive"
    fixed_ratio: float = 0.75

    def __post_init__(self):
        if not 0 < self.sigma0 < self.sigma_max <= 1:
            raise ValueError(
                f"need 0 < sigma0 < sigma_max <= 1, got sigma0={self.sigma0}, sigma_max={self.sigma_max}"
            )
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.mode not in ("adaptive", "fixed"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if not 0 <= self.fixed_ratio <= 1:
            raise ValueError(f"fixed_ratio must lie in [0, 1], got {self.fixed_ratio}")

    @classmethod
    def fixed(cls, ratio: float = 0.75) -> "ScheduleParams":
        return cls(mode="fixed", fixed_ratio=ratio)


def masking_ratio(epoch: int, params: ScheduleParams) -> float:
    """Masking ratio for a 1-based ``epoch``."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based; got {epoch}")
    if params.mode == "fixed":
        return params.fixed_ratio
    return min(params.sigma0 + math.log(epoch) / params.tau, params.sigma_max)


def masked_count(N: int, ratio: float) -> int:
    """Number of masked patches, ``floor(N * ratio)``.

    For ratios strictly between 0 and 1 the count is clamped to ``[1, N - 1]``
    so an image always has both masked and visible patches.
    """
    if not 0 <= ratio <= 1:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    # guard so decimal ratios floor at their decimal value (100 * 0.29 is 28.999...)
    n = math.floor(N * ratio + 1e-9)
    if 0 < ratio < 1 and N >= 2:
        n = min(max(n, 1), N - 1)
    return n
