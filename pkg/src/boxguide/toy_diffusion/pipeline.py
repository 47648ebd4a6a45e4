"""Denoising loop with per-step box prediction and unique-mask attention control."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from ..attn_control import ControlPlan, build_plan, register_hooks
from ..boxnet import BoxNet, BoxNetCheckpoint
from ..prompt_parser import EntityLexicon, ParsedPrompt, parse_entities
from .stack import ToyStack

log = logging.getLogger(__name__)

CONTROL_MODES = ("off", "cross", "both")


@dataclass
class StepRecord:
    t: int
    boxes: list[list[list[float]]] = field(default_factory=list)  # per sample, per entity: cx cy w h
    mask_areas: dict = field(default_factory=dict)  # "HxW" -> per sample, per entity unique-mask area
    attn: list[dict] = field(default_factory=list)
    latent_norm: list[float] = field(default_factory=list)
    controlled: bool = False


@dataclass
class GenerationTrace:
    prompt: str
    seeds: list[int]
    control: str
    config_hash: str
    n_entities: int
    steps: list[StepRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def boxes_at(self, step_index: int, sample: int = 0) -> list[list[float]]:
        return self.steps[step_index].boxes[sample] if self.steps[step_index].boxes else []

    def final_boxes(self, sample: int = 0) -> list[list[float]]:
        for rec in reversed(self.steps):
            if rec.boxes:
                return rec.boxes[sample]
        return []

    def to_text(self) -> str:
        """One record per line, key=value pairs."""
        head = {"prompt": self.prompt, "seeds": self.seeds, "control": self.control,
                "config_hash": self.config_hash, "n_entities": self.n_entities, "warnings": self.warnings}
        lines = ["header " + " ".join(f"{k}={json.dumps(v, separators=(',', ':'))}" for k, v in head.items())]
        for rec in self.steps:
            parts = [f"{k}={json.dumps(v, separators=(',', ':'))}" for k, v in asdict(rec).items()]
            lines.append("step " + " ".join(parts))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class GenerateOptions:
    control: str = "off"
    scope_override: str | None = None
    mask_override: str | None = None  # "ones" for identity control
    convention: str = "paper"
    renorm: bool = False
    transpose_self: bool = False
    step_range: tuple[int, int] | None = None  # inclusive (t_low, t_high) where control applies
    guidance_scale: float | None = None

    def __post_init__(self):
        if self.control not in CONTROL_MODES:
            raise ValueError(f"control must be one of {CONTROL_MODES}")


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def initial_latents(stack: ToyStack, seeds: Sequence[int]) -> torch.Tensor:
    """One independent generator per seed, so batch composition never changes a sample."""
    return torch.stack([torch.randn(stack.latent_shape, generator=torch.Generator().manual_seed(int(s)))
                        for s in seeds])


class Generator:
    """Runs the toy denoiser, optionally with a BoxNet-driven control loop.

    One instance owns its denoiser; do not share across concurrent runs.
    """

    def __init__(self, stack: ToyStack, boxnet: BoxNet | BoxNetCheckpoint | None = None,
                 lexicon: EntityLexicon | None = None):
        self.stack = stack
        if isinstance(boxnet, BoxNetCheckpoint):
            boxnet = boxnet.build()
        self.boxnet = boxnet
        if boxnet is not None:
            boxnet.eval()
        self.lexicon = lexicon or EntityLexicon.default()

    def parse(self, prompt: str) -> ParsedPrompt:
        max_entities = self.boxnet.config.M if self.boxnet is not None else 30
        return parse_entities(prompt, self.lexicon, self.stack.text_encoder.tokenizer, max_entities)

    def predict_boxes(self, z, t, ctx, queries) -> list[list]:
        tt = torch.full((z.shape[0],), t, dtype=torch.long)
        _, feats = self.stack.unet(z, tt, ctx, return_features=True)
        feature = self.boxnet.extract_features(feats, t)
        return self.boxnet.predict_boxes(feature, queries)

    @torch.no_grad()
    def generate(self, prompt: str, seeds: Sequence[int], options: GenerateOptions = GenerateOptions()):
        """Returns (images (B, 64, 64, 3) float in [0, 1], trace)."""
        stack = self.stack
        seeds = [int(s) for s in seeds]
        control = options.control
        guidance = options.guidance_scale if options.guidance_scale is not None else stack.config.guidance_scale
        parsed = self.parse(prompt)
        warnings = []
        if control != "off":
            if self.boxnet is None:
                raise ValueError("control requires a BoxNet checkpoint")
            if parsed.n_entities == 0:
                warnings.append("prompt parsed to zero entities; running uncontrolled")
                log.warning(warnings[-1])
                control = "off"
        scope = options.scope_override or ("cross" if control == "cross" else "both")
        payload = {"prompt": prompt, "seeds": seeds, "options": asdict(options), "stack": asdict(stack.config),
                   "guidance": guidance, "boxnet": None if self.boxnet is None else self.boxnet.config.to_dict()}
        trace = GenerationTrace(prompt, seeds, control, config_hash(payload), parsed.n_entities, warnings=warnings)

        B = len(seeds)
        ctx = stack.context([prompt] * B)
        uncond = stack.context([""] * B) if guidance != 1.0 else None
        queries = None
        if control != "off":
            q = self.boxnet.encode_entities(parsed.spans, stack.text_encoder)
            queries = [q] * B
        resolutions = sorted(stack.unet.attention_resolutions(), reverse=True)
        gens = [torch.Generator().manual_seed(s + 1) for s in seeds]
        z = initial_latents(stack, seeds)

        for t in range(stack.scheduler.T, 0, -1):
            rec = StepRecord(t)
            active = control != "off" and (options.step_range is None
                                           or options.step_range[0] <= t <= options.step_range[1])
            tt = torch.full((B,), t, dtype=torch.long)
            if active:
                boxes = self.predict_boxes(z, t, ctx, queries)
                plans = [build_plan(parsed.spans, b, resolutions, options.convention, options.renorm,
                                    options.transpose_self, options.mask_override) for b in boxes]
                rec.boxes = [[list(bx.as_tuple()) for bx in b] for b in boxes]
                rec.mask_areas = {f"{h}x{w}": [[int(a) for a in p.masks((h, w)).masks.sum((1, 2))] for p in plans]
                                  for h, w in resolutions}
                handle = register_hooks(stack.unet, plans, scope)
                handle.step = t
                try:
                    eps = stack.unet(z, tt, ctx)
                finally:
                    handle.remove()
                rec.attn = [asdict(r) for r in handle.records]
                rec.controlled = True
            else:
                eps = stack.unet(z, tt, ctx)
            if uncond is not None:
                eps_u = stack.unet(z, tt, uncond)
                eps = eps_u + guidance * (eps - eps_u)
            z = _step_each(stack, eps, t, z, gens)
            rec.latent_norm = [float(v) for v in z.flatten(1).norm(dim=1)]
            trace.steps.append(rec)
        images = stack.decode(z).permute(0, 2, 3, 1).numpy()
        return images, trace


def _step_each(stack, eps, t, z, gens):
    if stack.scheduler.config.sampler == "ddim":
        return stack.scheduler.step(eps, t, z)
    return torch.cat([stack.scheduler.step(eps[i:i + 1], t, z[i:i + 1], gens[i]) for i in range(z.shape[0])])


def generate(prompt: str, seed: int, control: str = "off", boxnet_ckpt=None, stack: ToyStack | None = None,
             **option_kw):
    """Single-image convenience wrapper: returns (image (64, 64, 3), trace)."""
    stack = stack or ToyStack.load()
    if isinstance(boxnet_ckpt, (str, bytes)) or hasattr(boxnet_ckpt, "__fspath__"):
        boxnet_ckpt = BoxNetCheckpoint.load(boxnet_ckpt)
    gen = Generator(stack, boxnet_ckpt)
    images, trace = gen.generate(prompt, [seed], GenerateOptions(control=control, **option_kw))
    return images[0], trace
