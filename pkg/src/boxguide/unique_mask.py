"""Turn possibly-overlapping entity boxes into pairwise-disjoint binary masks.

Each box gets a 2-D Gaussian field; a cell belongs to the entity whose field is
largest there (lowest index on exact ties), intersected with that entity's own
rasterized box.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .box import Box

log = logging.getLogger(__name__)

CONVENTIONS = ("paper", "standard")


@dataclass
class UniqueMaskSet:
    masks: np.ndarray  # (N, H, W) bool, pairwise disjoint
    raw_masks: np.ndarray  # (N, H, W) bool, rasterized boxes
    argmax_map: np.ndarray  # (H, W) int, values 1..N
    fields: np.ndarray  # (N, H, W) float64
    resolution: tuple[int, int]

    @property
    def n(self) -> int:
        return self.masks.shape[0]

    def flat(self) -> np.ndarray:
        """(N, H*W) row-major flattened unique masks."""
        return self.masks.reshape(self.n, -1)

    def empty_entities(self) -> list[int]:
        return [i for i in range(self.n) if not self.masks[i].any()]


def _as_tuple(box) -> tuple[float, float, float, float]:
    return box.as_tuple() if isinstance(box, Box) else tuple(float(v) for v in box)


def rasterize_box(box, hw: tuple[int, int]) -> np.ndarray:
    """Cells whose centers fall inside the (closed) box; never empty."""
    cx, cy, w, h = _as_tuple(box)
    H, W = hw
    xs = (np.arange(W) + 0.5) / W
    ys = (np.arange(H) + 0.5) / H
    in_x = (xs >= cx - w / 2) & (xs <= cx + w / 2)
    in_y = (ys >= cy - h / 2) & (ys <= cy + h / 2)
    mask = in_y[:, None] & in_x[None, :]
    if not mask.any():
        mask[min(int(cy * H), H - 1), min(int(cx * W), W - 1)] = True
    return mask


def gaussian_field(box, hw: tuple[int, int], convention: str = "paper") -> np.ndarray:
    """Per-box field evaluated at cell centers, in grid units.

    ``paper``: 1/sqrt(2*pi*v1*v2) * exp(-((x-cx)^2/v1 + (y-cy)^2/v2) / 2) with
    v1 = w/2, v2 = h/2; ``standard``: a proper normal density with standard
    deviations w/2 and h/2.
    """
    cx, cy, w, h = _as_tuple(box)
    H, W = hw
    cx, cy, v1, v2 = cx * W, cy * H, w * W / 2, h * H / 2
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    dx2 = (xs[None, :] - cx) ** 2
    dy2 = (ys[:, None] - cy) ** 2
    if convention == "paper":
        return np.exp(-0.5 * (dx2 / v1 + dy2 / v2)) / math.sqrt(2 * math.pi * v1 * v2)
    if convention == "standard":
        return np.exp(-0.5 * (dx2 / v1 ** 2 + dy2 / v2 ** 2)) / (2 * math.pi * v1 * v2)
    raise ValueError(f"unknown gaussian convention {convention!r}")


def unique_masks(boxes: Sequence, hw: tuple[int, int], convention: str = "paper") -> UniqueMaskSet:
    if len(boxes) == 0:
        raise ValueError("need at least one box")
    raw = np.stack([rasterize_box(b, hw) for b in boxes])
    fields = np.stack([gaussian_field(b, hw, convention) for b in boxes])
    argmax_map = fields.argmax(axis=0) + 1  # first maximum wins ties
    owner = argmax_map[None] == np.arange(1, len(boxes) + 1)[:, None, None]
    masks = owner & raw
    result = UniqueMaskSet(masks, raw, argmax_map, fields, tuple(hw))
    for n in result.empty_entities():
        log.warning("entity %d has an empty unique mask at %dx%d", n, *hw)
    return result


def write_pgm(mask: np.ndarray, path: str | Path, comment: str | None = None) -> None:
    """Binary PGM (P5), 255 for set cells."""
    arr = np.asarray(mask)
    data = (arr > 0).astype(np.uint8) * 255 if arr.dtype == bool or arr.max() <= 1 else arr.astype(np.uint8)
    H, W = data.shape
    note = f"# {comment}\n" if comment else ""
    Path(path).write_bytes(f"P5\n{note}{W} {H}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    W, H = int(fields[1]), int(fields[2])
    pos += 1  # single whitespace byte before the raster
    return np.frombuffer(raw[pos:pos + W * H], dtype=np.uint8).reshape(H, W)


def dump_text(mask_set: UniqueMaskSet, header: str | None = None) -> str:
    H, W = mask_set.resolution
    lines = [f"# {header}"] if header else []
    lines.append(f"resolution={H}x{W} n={mask_set.n}")
    lines.append("argmax:")
    lines.extend(" ".join(str(v) for v in row) for row in mask_set.argmax_map)
    for i in range(mask_set.n):
        lines.append(f"mask {i + 1} area={int(mask_set.masks[i].sum())} raw_area={int(mask_set.raw_masks[i].sum())}:")
        lines.extend("".join("#" if v else "." for v in row) for row in mask_set.masks[i])
    return "\n".join(lines) + "\n"
