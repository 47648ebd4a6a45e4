"""Two-entity benchmark prompts and the minimum-object-score metric."""
from __future__ import annotations

import itertools
import json
import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .box import Box
from .toy_diffusion.shapes import BACKGROUND, PALETTE, SHAPES

log = logging.getLogger(__name__)

COCO_ANIMALS = ("cat", "dog", "bird", "bear", "horse", "elephant", "sheep", "giraffe")
COCO_OBJECTS = ("backpack", "suitcase", "chair", "car", "couch", "bench", "cake", "umbrella")
NONCOCO_ANIMALS = ("tiger", "panda", "lion", "fox", "squirrel", "turkey", "penguin", "turtle")
NONCOCO_OBJECTS = ("shoes", "television", "watermelon", "candle", "bucket", "hammock", "pumpkin", "carrot")
COLORS = ("red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "gray", "black", "white")

CATEGORIES = {
    "COCO": COCO_ANIMALS + COCO_OBJECTS,
    "NON-COCO": NONCOCO_ANIMALS + NONCOCO_OBJECTS,
    "TOY": SHAPES,
}
_CATEGORY_ALIASES = {"coco": "COCO", "noncoco": "NON-COCO", "non-coco": "NON-COCO", "toy": "TOY"}

TEMPLATE = "a {color_a} {entity_a} and a {color_b} {entity_b}"


class DetectorError(RuntimeError):
    pass


def normalize_category(category: str) -> str:
    key = _CATEGORY_ALIASES.get(category.lower(), category)
    if key not in CATEGORIES:
        raise ValueError(f"unknown benchmark category {category!r}")
    return key


@dataclass(frozen=True)
class BenchmarkPrompt:
    index: int
    category: str
    entities: tuple[str, str]
    colors: tuple[str, str]

    def __post_init__(self):
        if self.entities[0] == self.entities[1]:
            raise ValueError("benchmark entities must differ")
        if self.colors[0] == self.colors[1]:
            raise ValueError("benchmark colors must differ")

    @property
    def text(self) -> str:
        return TEMPLATE.format(color_a=self.colors[0], entity_a=self.entities[0],
                               color_b=self.colors[1], entity_b=self.entities[1])

    @property
    def detection_phrases(self) -> list[str]:
        """Name-only phrases; color words mislead open-set detectors."""
        return [f"a {e}" for e in self.entities]

    def to_line(self) -> str:
        return "\t".join([str(self.index), self.category, self.colors[0], self.entities[0],
                          self.colors[1], self.entities[1], self.text])

    @classmethod
    def from_line(cls, line: str) -> "BenchmarkPrompt":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 7:
            raise ValueError(f"malformed benchmark line: {line!r}")
        prompt = cls(int(parts[0]), parts[1], (parts[3], parts[5]), (parts[2], parts[4]))
        if prompt.text != parts[6]:
            raise ValueError(f"benchmark text does not match its fields: {parts[6]!r}")
        return prompt


def gen_benchmark(category: str, seed: int = 0, limit: int | None = None) -> list[BenchmarkPrompt]:
    """Every unordered pair of the category's entities, colors drawn without repetition.

    Colors for prompt ``i`` come from an RNG keyed on (seed, i) only.
    """
    category = normalize_category(category)
    pairs = list(itertools.combinations(CATEGORIES[category], 2))
    if category == "TOY":
        # only 3 shapes: cycle through both orders of every pair
        base = pairs + [(b, a) for a, b in pairs]
        pairs = [base[i % len(base)] for i in range(limit or 20)]
    out = []
    for i, (a, b) in enumerate(pairs[:limit] if limit else pairs):
        rng = np.random.default_rng([seed, i])
        ca, cb = rng.choice(len(COLORS), size=2, replace=False)
        out.append(BenchmarkPrompt(i, category, (a, b), (COLORS[ca], COLORS[cb])))
    return out


def format_benchmark(prompts: Sequence[BenchmarkPrompt], seed: int) -> str:
    category = prompts[0].category if prompts else ""
    lines = [f"# category={category} seed={seed} n={len(prompts)}",
             "# index\tcategory\tcolor_a\tentity_a\tcolor_b\tentity_b\ttext"]
    lines += [p.to_line() for p in prompts]
    return "\n".join(lines) + "\n"


def load_prompts(path: str | Path) -> list[BenchmarkPrompt | str]:
    """Benchmark files give BenchmarkPrompts; any other non-comment line is a free-form prompt."""
    out: list[BenchmarkPrompt | str] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        out.append(BenchmarkPrompt.from_line(line) if "\t" in line else line.strip())
    return out


# -- detection ------------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    matched_phrase: str

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


class Detector(Protocol):
    detector_id: str

    def detect(self, image: np.ndarray, phrase: str) -> list[Detection]:
        ...


# shape fill ratio inside its own bounding box
_FILL = {"square": 1.0, "circle": np.pi / 4, "triangle": 0.5}


@dataclass
class Component:
    color: str
    box: Box
    area: int
    fill: float
    aspect: float


class SyntheticOracle:
    """Analytic detector for toy shape images.

    Pixels are labeled with the nearest palette color (or background); each
    connected same-color region is a candidate object, scored for a shape name
    by how well its fill ratio and aspect ratio match the ideal shape.
    Candidates scoring below ``score_threshold`` are not reported, as with the
    box threshold of an open-set detector.
    """

    detector_id = "synthetic-oracle-v1"

    def __init__(self, min_area: int = 30, fill_tolerance: float = 0.1, max_color_dist: float = 60.0,
                 score_threshold: float = 0.3):
        self.min_area = min_area
        self.score_threshold = score_threshold
        self.fill_tolerance = fill_tolerance
        self.max_color_dist = max_color_dist
        names = ["background", *PALETTE]
        self._names = names
        self._rgb = np.array([BACKGROUND, *PALETTE.values()], dtype=np.float64)

    def label_colors(self, image: np.ndarray) -> np.ndarray:
        """(H, W) index into ["background", *palette]; -1 where no color is close."""
        img = _as_uint8(image).astype(np.float64)
        d = np.linalg.norm(img[:, :, None, :] - self._rgb[None, None], axis=-1)
        labels = d.argmin(-1)
        labels[d.min(-1) > self.max_color_dist] = -1
        return labels

    def components(self, image: np.ndarray) -> list[Component]:
        labels = self.label_colors(image)
        H, W = labels.shape
        out = []
        for ci in range(1, len(self._names)):
            regions, count = ndimage.label(labels == ci)
            for r, sl in enumerate(ndimage.find_objects(regions), start=1):
                if sl is None:
                    continue
                area = int((regions[sl] == r).sum())
                if area < self.min_area:
                    continue
                h, w = sl[0].stop - sl[0].start, sl[1].stop - sl[1].start
                box = Box((sl[1].start + w / 2) / W, (sl[0].start + h / 2) / H, w / W, h / H)
                out.append(Component(self._names[ci], box, area, area / (w * h), min(w, h) / max(w, h)))
        return out

    def shape_score(self, comp: Component, shape: str) -> float:
        fill_err = abs(comp.fill - _FILL[shape]) / self.fill_tolerance
        return float(np.exp(-0.5 * fill_err ** 2) * comp.aspect)

    def detect(self, image: np.ndarray, phrase: str) -> list[Detection]:
        shape = phrase.split()[-1]
        if shape not in _FILL:
            return []
        scored = ((c, self.shape_score(c, shape)) for c in self.components(image))
        return [Detection(c.box, s, phrase) for c, s in scored if s >= self.score_threshold]


class ExternalDetector:
    """Adapter for an out-of-process open-set detector.

    The command is run as ``<cmd> <image.png> <phrase>`` and must print one
    detection per line as ``cx cy w h score`` (normalized box, score in [0, 1]).
    A non-zero exit status or malformed output raises DetectorError.
    """

    def __init__(self, command: str, timeout: float = 300.0):
        self.command = shlex.split(command)
        if not self.command:
            raise ValueError("empty detector command")
        self.timeout = timeout
        self.detector_id = f"external:{command}"

    def detect(self, image: np.ndarray, phrase: str) -> list[Detection]:
        from PIL import Image

        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "image.png"
            Image.fromarray(_as_uint8(image)).save(path)
            try:
                proc = subprocess.run([*self.command, str(path), phrase], capture_output=True, text=True,
                                      timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as e:
                raise DetectorError(f"detector failed to run: {e}") from e
        if proc.returncode != 0:
            raise DetectorError(f"detector exited with status {proc.returncode}: {proc.stderr.strip()[:200]}")
        dets = []
        for line in proc.stdout.splitlines():
            if not line.strip():
                continue
            try:
                cx, cy, w, h, score = (float(v) for v in line.split())
                dets.append(Detection(Box(cx, cy, w, h), score, phrase))
            except ValueError as e:
                raise DetectorError(f"malformed detector output line {line!r}: {e}") from e
        return dets


def make_detector(spec: str) -> Detector:
    if spec == "oracle":
        return SyntheticOracle()
    if spec.startswith("external:"):
        return ExternalDetector(spec[len("external:"):])
    raise ValueError(f"unknown detector {spec!r}; use 'oracle' or 'external:<cmd>'")


def _as_uint8(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr
    return (np.clip(arr, 0, 1) * 255 + 0.5).astype(np.uint8)


def entity_scores(image: np.ndarray, entities: Sequence[str], detector: Detector) -> list[float]:
    """Highest detection score per entity phrase; 0 when nothing is detected."""
    return [max((d.score for d in detector.detect(image, phrase)), default=0.0) for phrase in entities]


def min_object_score(image: np.ndarray, entities: Sequence[str], detector: Detector) -> float:
    if not entities:
        raise ValueError("need at least one entity phrase")
    return min(entity_scores(image, entities, detector))


# -- evaluation -----------------------------------------------------------------

@dataclass
class EvalRecord:
    prompt_index: int
    prompt: str
    seed: int
    score: float | None  # None when generation failed
    error: str = ""


@dataclass
class EvalReport:
    method: str
    detector: str
    config_hash: str
    records: list[EvalRecord] = field(default_factory=list)

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records if r.score is not None], dtype=np.float64)

    @property
    def failures(self) -> int:
        return sum(r.score is None for r in self.records)

    @property
    def mean(self) -> float:
        s = self.scores
        return float(s.mean()) if len(s) else float("nan")

    @property
    def std(self) -> float:
        """Population std over per-sample records."""
        s = self.scores
        return float(s.std()) if len(s) else float("nan")

    def to_text(self) -> str:
        head = {"method": self.method, "detector": self.detector, "config_hash": self.config_hash,
                "n": len(self.records), "failures": self.failures, "mean": self.mean, "std": self.std,
                "std_over": "per-sample records"}
        lines = [f"# {k}={json.dumps(v)}" for k, v in head.items()]
        lines.append("# prompt_index\tseed\tscore\terror\tprompt")
        for r in self.records:
            score = "" if r.score is None else repr(float(r.score))
            lines.append(f"{r.prompt_index}\t{r.seed}\t{score}\t{r.error}\t{r.prompt}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        head, records = {}, []
        for line in text.splitlines():
            if line.startswith("# ") and "=" in line.split("\t")[0]:
                k, v = line[2:].split("=", 1)
                head[k] = json.loads(v)
            elif line and not line.startswith("#"):
                idx, seed, score, error, prompt = line.split("\t", 4)
                records.append(EvalRecord(int(idx), prompt, int(seed), float(score) if score else None, error))
        return cls(head["method"], head["detector"], head["config_hash"], records)


GenerateFn = Callable[[str, Sequence[int]], Sequence[np.ndarray]]


def evaluate(generate: GenerateFn, prompts: Sequence[BenchmarkPrompt | str], seeds: Sequence[int],
             detector: Detector, method: str = "", config_hash: str = "",
             entity_phrases: Callable[[str], list[str]] | None = None) -> EvalReport:
    """Score every (prompt, seed) pair; ``generate(prompt, seeds)`` returns one image per seed.

    A generation failure is recorded (and excluded from the aggregate); a
    detector failure propagates.
    """
    report = EvalReport(method, getattr(detector, "detector_id", type(detector).__name__), config_hash)
    seeds = [int(s) for s in seeds]
    for i, p in enumerate(prompts):
        if isinstance(p, BenchmarkPrompt):
            text, phrases, index = p.text, p.detection_phrases, p.index
        else:
            if entity_phrases is None:
                raise ValueError("free-form prompts need an entity_phrases function")
            text, phrases, index = p, entity_phrases(p), i
        try:
            images = list(generate(text, seeds))
            if len(images) != len(seeds):
                raise RuntimeError(f"generator returned {len(images)} images for {len(seeds)} seeds")
        except Exception as e:  # noqa: BLE001 - failures are data here
            log.warning("generation failed for %r: %s", text, e)
            report.records += [EvalRecord(index, text, s, None, type(e).__name__) for s in seeds]
            continue
        for s, img in zip(seeds, images):
            report.records.append(EvalRecord(index, text, s, min_object_score(img, phrases, detector)))
    return report
