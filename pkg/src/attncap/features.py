"""Spatial feature-map data model shared by the decoder, generator and IO."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FeatureMap:
    """An h x w grid of f-dimensional features, stored flattened as (s, f).

    Cell (row, col) maps to flat index row * w + col.
    """

    h: int
    w: int
    data: np.ndarray  # shape (h * w, f)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != self.h * self.w:
            raise ValueError(f"expected ({self.h * self.w}, f) data, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("feature map contains non-finite values")

    @property
    def s(self) -> int:
        return self.h * self.w

    @property
    def f(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "FeatureMap":
        """Build from an (h, w, f) array by flattening the spatial axes."""
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 3:
            raise ValueError(f"expected an (h, w, f) array, got shape {grid.shape}")
        h, w, f = grid.shape
        return cls(h=h, w=w, data=grid.reshape(h * w, f))

    def to_grid(self) -> np.ndarray:
        return self.data.reshape(self.h, self.w, self.f)
