from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Normalized (cx, cy, w, h) rectangle; all components in [0, 1], w and h positive."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(np.isfinite(v) and 0.0 <= v <= 1.0 for v in vals):
            raise ValueError(f"box components must lie in [0, 1]: {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box width and height must be positive: {vals}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @classmethod
    def from_seq(cls, seq) -> "Box":
        cx, cy, w, h = (float(v) for v in seq)
        return cls(cx, cy, w, h)

    def __str__(self) -> str:
        return f"{self.cx:.4f} {self.cy:.4f} {self.w:.4f} {self.h:.4f}"
