"""Coarse random-grid image masking for the student input.

An s x s grid of uniform [0, 1) values is thresholded at the masking ratio
``alpha`` (cells with value >= alpha are kept), expanded to the image size
with nearest-neighbour resizing, and applied to the image. Masked pixels are
set to a fill value: 0.0, 1.0 (the [0, 1] analogue of 255), or alternating
between the two from one adaptation step to the next.

With this convention the expected masked fraction equals ``alpha``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .autodiff import interp_matrix
from .errors import ConfigurationError, DimensionError


class Fill(str, enum.Enum):
    ZERO = "zero"
    MAX = "max"
    ALTERNATE = "alternate"


@dataclass(frozen=True)
class MaskSpec:
    grid_size: int = 32
    ratio: float = 0.75
    fill: Fill = Fill.ZERO

    def __post_init__(self):
        if self.grid_size < 1:
            raise ConfigurationError(f"grid_size must be >= 1, got {self.grid_size}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigurationError(f"masking ratio must lie in [0, 1], got {self.ratio}")
        object.__setattr__(self, "fill", Fill(self.fill))

    def fill_value(self, step: int = 0) -> float:
        if self.fill is Fill.ZERO:
            return 0.0
        if self.fill is Fill.MAX:
            return 1.0
        return 0.0 if step % 2 == 0 else 1.0


@dataclass(frozen=True)
class BinaryMask:
    """1 = keep, 0 = masked. ``upscaled`` is the nearest expansion of ``grid``."""

    grid: np.ndarray
    upscaled: np.ndarray


def sample_mask(s: int, rng: np.random.Generator) -> np.ndarray:
    if s < 1:
        raise ConfigurationError(f"grid size must be >= 1, got {s}")
    return rng.random((s, s))


def upscale(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour expansion; output index i reads cell floor(i * s / h)."""
    rows = interp_matrix(grid.shape[0], h, "nearest").argmax(axis=1)
    cols = interp_matrix(grid.shape[1], w, "nearest").argmax(axis=1)
    return grid[np.ix_(rows, cols)]


def binarize(grid: np.ndarray, alpha: float, h: int | None = None, w: int | None = None) -> BinaryMask:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"masking ratio must lie in [0, 1], got {alpha}")
    keep = (np.asarray(grid) >= alpha).astype(np.uint8)
    h = keep.shape[0] if h is None else h
    w = keep.shape[1] if w is None else w
    return BinaryMask(keep, upscale(keep, h, w))


def make_mask(spec: MaskSpec, h: int, w: int, rng: np.random.Generator) -> BinaryMask:
    return binarize(sample_mask(spec.grid_size, rng), spec.ratio, h, w)


def apply_mask(x: np.ndarray, mask: BinaryMask, fill: Fill | str | float = Fill.ZERO,
               step: int = 0) -> np.ndarray:
    """Copy of ``x`` (C, H, W) with masked pixels replaced by the fill value.

    ``fill`` is a :class:`Fill` mode (``step`` picks the phase of
    ``ALTERNATE``) or a literal float.
    """
    if not isinstance(fill, (int, float)):
        fill = MaskSpec(fill=Fill(fill)).fill_value(step)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"apply_mask expects (C, H, W), got {x.shape}")
    if mask.upscaled.shape != x.shape[1:]:
        raise DimensionError(f"mask {mask.upscaled.shape} does not match image {x.shape[1:]}")
    keep = mask.upscaled.astype(bool)
    return np.where(keep[None], x, fill)


def masked_fraction(mask: BinaryMask) -> float:
    return float(1.0 - mask.upscaled.mean())
