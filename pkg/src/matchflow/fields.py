"""Shared flow-field container.

Flow convention used everywhere in this package: channel 0 is u, the
horizontal (column) displacement; channel 1 is v, the vertical (row)
displacement.  A pixel at (row, col) maps to (row + v, col + u).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor

EIGHTH = "eighth"
FULL = "full"


@dataclass
class FlowField:
    """A (2, H, W) displacement field tagged with its resolution level."""

    values: Tensor | np.ndarray
    resolution: str

    def __post_init__(self):
        if self.resolution not in (EIGHTH, FULL):
            raise ValueError(f"unknown flow resolution tag {self.resolution!r}")
        if self.shape[0] != 2 or len(self.shape) != 3:
            raise ValueError(f"flow values must be (2, H, W), got {self.shape}")

    @property
    def shape(self):
        return self.values.shape

    @property
    def array(self) -> np.ndarray:
        """Plain ndarray view of the values (detached if on the tape)."""
        return self.values.data if isinstance(self.values, Tensor) else self.values

    def require(self, resolution: str) -> "FlowField":
        if self.resolution != resolution:
            raise ValueError(
                f"expected a {resolution}-resolution flow field, got {self.resolution}")
        return self
