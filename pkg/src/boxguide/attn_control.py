"""Unique-mask control of post-softmax cross- and self-attention maps.

Maps use rows = queries (flattened pixels, row-major ``y * W + x``) and
columns = keys (prompt tokens for cross-attention, pixels for self-attention).
Control is a column-wise elementwise product with a binary mask; nothing is
renormalized unless explicitly requested.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .prompt_parser import EntitySpan
from .unique_mask import UniqueMaskSet, unique_masks

SCOPES = ("cross", "self", "both")


class ControlError(ValueError):
    pass


@dataclass
class AttentionMap:
    data: np.ndarray  # (L, K) or (L, L)
    hw: tuple[int, int]

    def __post_init__(self):
        H, W = self.hw
        if self.data.ndim != 2 or self.data.shape[0] != H * W:
            raise ControlError(f"attention map rows {self.data.shape} do not match {H}x{W}")


@dataclass
class ControlPlan:
    token_sets: list[tuple[int, ...]]
    masks_by_resolution: dict[tuple[int, int], UniqueMaskSet]
    renorm: bool = False
    transpose_self: bool = False
    spans: list[EntitySpan] = field(default_factory=list)

    def __post_init__(self):
        for hw, ms in self.masks_by_resolution.items():
            if ms.n != len(self.token_sets):
                raise ControlError(f"mask set at {hw} has {ms.n} entities, plan has {len(self.token_sets)} spans")

    @property
    def n(self) -> int:
        return len(self.token_sets)

    def masks(self, hw: tuple[int, int]) -> UniqueMaskSet:
        try:
            return self.masks_by_resolution[tuple(hw)]
        except KeyError:
            raise ControlError(f"no masks for attention resolution {hw}") from None

    @classmethod
    def empty(cls, resolutions: Sequence[tuple[int, int]] = ()) -> "ControlPlan":
        return cls([], {})


def build_plan(spans: Sequence[EntitySpan], boxes: Sequence, resolutions: Sequence[tuple[int, int]],
               convention: str = "paper", renorm: bool = False, transpose_self: bool = False,
               override: str | None = None) -> ControlPlan:
    """Masks are rasterized independently at every resolution from the same normalized boxes.

    ``override="ones"`` replaces every unique mask with all-ones (identity control, for debugging).
    """
    if len(spans) != len(boxes):
        raise ControlError(f"{len(spans)} spans but {len(boxes)} boxes")
    masks = {}
    if len(boxes):
        for hw in resolutions:
            ms = unique_masks(boxes, hw, convention)
            if override == "ones":
                ms = UniqueMaskSet(np.ones_like(ms.masks), ms.raw_masks, ms.argmax_map, ms.fields, ms.resolution)
            elif override is not None:
                raise ControlError(f"unknown mask override {override!r}")
            masks[tuple(hw)] = ms
    return ControlPlan([tuple(s.token_indices) for s in spans], masks, renorm, transpose_self, list(spans))


def cross_multiplier(plan: ControlPlan, hw: tuple[int, int], n_keys: int) -> np.ndarray:
    """(L, K) factor: column i of entity n's tokens is flatten(m'_n); others are 1."""
    H, W = hw
    mult = np.ones((H * W, n_keys), dtype=np.float32)
    if plan.n == 0:
        return mult
    flat = plan.masks(hw).flat()
    for n, tokens in enumerate(plan.token_sets):
        for i in tokens:
            if not 0 <= i < n_keys:
                raise ControlError(f"token index {i} out of range for {n_keys} keys")
            mult[:, i] = flat[n]
    return mult


def self_multiplier(plan: ControlPlan, hw: tuple[int, int]) -> np.ndarray:
    """(L, L) factor: for every key i inside entity n's mask, column i is flatten(m'_n)."""
    H, W = hw
    L = H * W
    mult = np.ones((L, L), dtype=np.float32)
    if plan.n == 0:
        return mult
    flat = plan.masks(hw).flat()
    for n in range(plan.n):
        cols = np.flatnonzero(flat[n])
        mult[:, cols] = flat[n][:, None]
    return mult.T.copy() if plan.transpose_self else mult


def _renormalize(x):
    s = x.sum(-1, keepdims=True)
    if isinstance(x, torch.Tensor):
        return torch.where(s > 0, x / torch.where(s > 0, s, torch.ones_like(s)), x)
    return np.where(s > 0, x / np.where(s > 0, s, 1), x)


def apply_cross_mask(C: AttentionMap, plan: ControlPlan) -> AttentionMap:
    mult = cross_multiplier(plan, C.hw, C.data.shape[1]).astype(C.data.dtype)
    out = C.data * mult
    return AttentionMap(_renormalize(out) if plan.renorm else out, C.hw)


def apply_self_mask(S: AttentionMap, plan: ControlPlan) -> AttentionMap:
    if S.data.shape[0] != S.data.shape[1]:
        raise ControlError(f"self-attention map must be square, got {S.data.shape}")
    if plan.n == 0:
        return AttentionMap(S.data.copy(), S.hw)
    out = S.data * self_multiplier(plan, S.hw).astype(S.data.dtype)
    return AttentionMap(_renormalize(out) if plan.renorm else out, S.hw)


@dataclass
class LayerRecord:
    step: int | None
    layer: str
    kind: str
    hw: tuple[int, int]
    pre_row_sum_mean: float
    post_row_sum_mean: float
    post_row_sum_min: float
    post_row_sum_max: float
    masked_fraction: float


class ControlHandle:
    """Active attention control on one denoiser; remove() detaches every hook."""

    def __init__(self, denoiser, plans: Sequence[ControlPlan], scope: str, record: bool = True):
        if scope not in SCOPES:
            raise ControlError(f"scope must be one of {SCOPES}")
        self.denoiser = denoiser
        self.plans = list(plans)
        self.scope = scope
        self.record = record
        self.step: int | None = None
        self.records: list[LayerRecord] = []
        kinds = ("cross", "self") if scope == "both" else (scope,)
        self._cache: dict = {}
        for layer in denoiser.attention_layers():
            if layer.kind in kinds:
                for p in self.plans:
                    if p.n:
                        p.masks(layer.hw)
        self._handles = denoiser.add_attention_hook(self._hook, kinds)

    def _multiplier(self, layer, n_keys: int, device, dtype) -> torch.Tensor:
        key = (layer.kind, layer.hw, n_keys)
        if key not in self._cache:
            mats = []
            for p in self.plans:
                m = cross_multiplier(p, layer.hw, n_keys) if layer.kind == "cross" else self_multiplier(p, layer.hw)
                mats.append(torch.from_numpy(m))
            self._cache[key] = torch.stack(mats)[:, None].to(device=device, dtype=dtype)
        return self._cache[key]

    def _hook(self, probs: torch.Tensor, layer) -> torch.Tensor:
        if probs.shape[0] != len(self.plans):
            raise ControlError(f"batch of {probs.shape[0]} maps but {len(self.plans)} plans")
        H, W = layer.hw
        if probs.shape[-2] != H * W:
            raise ControlError(f"layer {layer.name} declared {H}x{W} but has {probs.shape[-2]} queries")
        mult = self._multiplier(layer, probs.shape[-1], probs.device, probs.dtype)
        out = probs * mult
        if any(p.renorm for p in self.plans):
            out = _renormalize(out)
        if self.record:
            pre, post = probs.sum(-1), out.sum(-1)
            self.records.append(LayerRecord(
                self.step, layer.name, layer.kind, layer.hw,
                float(pre.mean()), float(post.mean()), float(post.min()), float(post.max()),
                float((mult == 0).float().mean()),
            ))
        return out

    @property
    def active(self) -> bool:
        return any(h.active for h in self._handles)

    def remove(self) -> None:
        for h in self._handles:
            h.remove()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.remove()


def register_hooks(denoiser, plan: ControlPlan | Sequence[ControlPlan], scope: str = "both",
                   record: bool = True) -> ControlHandle:
    """Install control on every attention layer in scope.

    ``plan`` may be one plan (applied to a batch of one) or one plan per batch row.
    Raises if a controlled layer's resolution has no masks in a nonempty plan.
    """
    plans = [plan] if isinstance(plan, ControlPlan) else list(plan)
    return ControlHandle(denoiser, plans, scope, record)
