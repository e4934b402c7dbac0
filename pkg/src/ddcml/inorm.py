"""Iterative gamma-correction intensity normalization.

Brings the mean intensity of the brain area (strictly positive voxels)
to a target level: while the mean is off target by more than a tolerance,
compute gamma = target / mean and apply x <- 255 * (x / 255)^(1 / gamma)
to every voxel.  Zeros and 255 are fixed points, so the brain mask and
the dynamic range survive every update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError, UsageError
from .volio import Volume


@dataclass(frozen=True)
class NormalizationConfig:
    """Target mean, convergence tolerance, and iteration cap (gray levels)."""

    mu: float = 128.0
    epsilon: float = 0.5
    max_iter: int = 100

    def __post_init__(self):
        if not 0.0 < self.mu < 255.0:
            raise UsageError(f"mu must be in (0, 255), got {self.mu}")
        if self.epsilon <= 0.0:
            raise UsageError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iter < 1:
            raise UsageError(f"max_iter must be >= 1, got {self.max_iter}")


def normalize_intensity(
    volume: Volume, cfg: NormalizationConfig = NormalizationConfig()
) -> tuple[Volume, int]:
    """Normalize brain-area mean intensity toward ``cfg.mu``.

    Returns the corrected volume and the number of correction iterations
    applied.  On return either the brain mean is within ``cfg.epsilon`` of
    the target or ``cfg.max_iter`` iterations were spent.
    """
    vox = volume.voxels.astype(np.float64)
    mask = vox > 0.0
    if not mask.any():
        raise DataError("volume has no brain area (all voxels zero)")

    iterations = 0
    mean = float(vox[mask].mean())
    while abs(mean - cfg.mu) > cfg.epsilon and iterations < cfg.max_iter:
        gamma = cfg.mu / mean
        vox = 255.0 * (vox / 255.0) ** (1.0 / gamma)
        if not np.isfinite(vox).all():
            raise NumericError("non-finite intensity produced by gamma update")
        iterations += 1
        mean = float(vox[mask].mean())
    return Volume(vox.astype(np.float32)), iterations


def brain_mean(volume: Volume) -> float:
    """Mean intensity over the brain area (voxels > 0)."""
    vox = volume.voxels
    mask = vox > 0.0
    if not mask.any():
        raise DataError("volume has no brain area (all voxels zero)")
    return float(vox[mask].astype(np.float64).mean())
