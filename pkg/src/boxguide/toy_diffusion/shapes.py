"""Procedural scenes of 1-3 flat-colored shapes with exact box annotations."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPES = ("square", "circle", "triangle")

# RGB in [0, 255]; names match the benchmark color vocabulary
PALETTE = {
    "red": (220, 30, 30),
    "orange": (250, 140, 20),
    "yellow": (250, 225, 30),
    "green": (40, 170, 50),
    "blue": (35, 65, 225),
    "purple": (135, 45, 175),
    "pink": (250, 140, 200),
    "brown": (125, 75, 35),
    "gray": (128, 128, 128),
    "black": (20, 20, 20),
    "white": (245, 245, 245),
}
COLORS = tuple(PALETTE)
BACKGROUND = (0, 120, 120)

IMAGE_SIZE = 64
MIN_SIZE, MAX_SIZE = 0.22, 0.42


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) uint8
    shapes: list[str]
    colors: list[str]
    boxes: np.ndarray  # (n, 4) normalized cx, cy, w, h
    caption: str

    @property
    def n(self) -> int:
        return len(self.shapes)


def shape_mask(kind: str, box_px: tuple[int, int, int, int], size: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean mask of a shape inscribed in the pixel box (x0, y0, x1, y1), end-exclusive."""
    x0, y0, x1, y1 = box_px
    ys, xs = np.mgrid[0:size, 0:size]
    px, py = xs + 0.5, ys + 0.5
    inside = (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)
    if kind == "square":
        return inside
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    if kind == "circle":
        r = (x1 - x0) / 2
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if kind == "triangle":
        # apex at top center, base along the bottom edge
        half = (x1 - x0) / 2 * (py - y0) / max(y1 - y0, 1e-9)
        return inside & (np.abs(px - cx) <= half)
    raise ValueError(f"unknown shape {kind!r}")


def caption_for(shapes: list[str], colors: list[str]) -> str:
    phrases = [f"a {c} {s}" for s, c in zip(shapes, colors)]
    if len(phrases) == 1:
        return phrases[0]
    return " , ".join(phrases[:-1]) + " and " + phrases[-1]


def render(shapes: list[str], colors: list[str], boxes_px: list[tuple[int, int, int, int]],
           size: int = IMAGE_SIZE) -> np.ndarray:
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for kind, color, box in zip(shapes, colors, boxes_px):
        img[shape_mask(kind, box, size)] = PALETTE[color]
    return img


def _tight_box(mask: np.ndarray, size: int) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    x0, x1, y0, y1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
    return np.array([(x0 + x1) / 2 / size, (y0 + y1) / 2 / size, (x1 - x0) / size, (y1 - y0) / size])


def sample_scene(rng: np.random.Generator, n: int | None = None, size: int = IMAGE_SIZE,
                 shapes: list[str] | None = None, colors: list[str] | None = None) -> Scene:
    """Draw a scene with non-overlapping shapes (1 px gap) and distinct colors."""
    if n is None:
        n = len(shapes) if shapes is not None else int(rng.integers(1, 4))
    if shapes is None:
        shapes = [SHAPES[i] for i in rng.integers(0, len(SHAPES), size=n)]
    if colors is None:
        colors = [COLORS[i] for i in rng.choice(len(COLORS), size=n, replace=False)]
    for _ in range(1000):
        placed: list[tuple[int, int, int, int]] = []
        for _ in range(n):
            for _ in range(200):
                s = int(round(rng.uniform(MIN_SIZE, MAX_SIZE) * size))
                x0 = int(rng.integers(0, size - s + 1))
                y0 = int(rng.integers(0, size - s + 1))
                cand = (x0, y0, x0 + s, y0 + s)
                if all(cand[2] + 1 <= b[0] or b[2] + 1 <= cand[0] or cand[3] + 1 <= b[1] or b[3] + 1 <= cand[1]
                       for b in placed):
                    placed.append(cand)
                    break
            else:
                break
        if len(placed) == n:
            break
    else:
        raise RuntimeError("could not place shapes")
    image = render(shapes, colors, placed, size)
    boxes = np.stack([_tight_box(shape_mask(k, b, size), size) for k, b in zip(shapes, placed)])
    return Scene(image, list(shapes), list(colors), boxes, caption_for(shapes, colors))


class ShapesDataset:
    """In-memory synthetic scenes; scene ``i`` depends only on (seed, i)."""

    def __init__(self, images: np.ndarray, shapes: list[list[str]], colors: list[list[str]],
                 boxes: list[np.ndarray], captions: list[str], seed: int | None = None):
        self.images = images
        self.shapes = shapes
        self.colors = colors
        self.boxes = boxes
        self.captions = captions
        self.seed = seed

    @classmethod
    def generate(cls, n_scenes: int, seed: int = 0, size: int = IMAGE_SIZE) -> "ShapesDataset":
        scenes = [sample_scene(np.random.default_rng([seed, i]), size=size) for i in range(n_scenes)]
        return cls(np.stack([s.image for s in scenes]), [s.shapes for s in scenes],
                   [s.colors for s in scenes], [s.boxes for s in scenes],
                   [s.caption for s in scenes], seed)

    def __len__(self) -> int:
        return len(self.captions)

    def __getitem__(self, i: int) -> Scene:
        return Scene(self.images[i], self.shapes[i], self.colors[i], self.boxes[i], self.captions[i])

    @property
    def dataset_id(self) -> str:
        return f"shapes-{len(self)}-seed{self.seed}"

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(directory / "images.npz", images=self.images)
        meta = {
            "seed": self.seed,
            "scenes": [
                {"shapes": s, "colors": c, "boxes": b.tolist(), "caption": cap}
                for s, c, b, cap in zip(self.shapes, self.colors, self.boxes, self.captions)
            ],
        }
        (directory / "annotations.json").write_text(json.dumps(meta), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "ShapesDataset":
        directory = Path(directory)
        images = np.load(directory / "images.npz")["images"]
        meta = json.loads((directory / "annotations.json").read_text(encoding="utf-8"))
        scenes = meta["scenes"]
        return cls(images, [s["shapes"] for s in scenes], [s["colors"] for s in scenes],
                   [np.asarray(s["boxes"], dtype=np.float64) for s in scenes],
                   [s["caption"] for s in scenes], meta.get("seed"))
