"""BoxNet: one box per entity phrase from frozen-denoiser activations.

Activations from the U-Net's down and up stages are resized to a common grid,
concatenated and linearly projected; the flattened grid feeds a transformer
encoder, and a decoder driven by M entity queries (phrase embeddings padded
with a trainable placeholder) emits boxes through a shared three-layer MLP head.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .box import Box
from .prompt_parser import EntitySpan

CKPT_MAGIC = b"BOXGUIDE-CKPT-v1"


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class BoxNetConfig:
    feature_channels: tuple[int, ...] = (48, 96, 96, 48)
    feature_hw: tuple[int, int] = (16, 16)
    text_dim: int = 64
    d_model: int = 64
    nhead: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    dim_ff: int = 128
    M: int = 8

    @classmethod
    def full(cls, **kw) -> "BoxNetConfig":
        """Paper-scale capacity: 6 + 6 layers and 30 queries."""
        base = dict(d_model=256, nhead=8, enc_layers=6, dec_layers=6, dim_ff=2048, M=30)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_channels"] = list(self.feature_channels)
        d["feature_hw"] = list(self.feature_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BoxNetConfig":
        d = dict(d)
        d["feature_channels"] = tuple(d["feature_channels"])
        d["feature_hw"] = tuple(d["feature_hw"])
        return cls(**d)


@dataclass
class FeatureTensor:
    data: torch.Tensor  # (B, C_f, H_f, W_f)
    source_timestep: int | torch.Tensor
    source_resolutions: list[tuple[int, int]]


@dataclass
class EntityQuerySet:
    embeddings: torch.Tensor  # (M, text_dim)
    n_entities: int
    category_ids: list[int] = field(default_factory=list)


def sine_position_encoding(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding, (h*w, dim), half the channels per axis."""
    quarter = dim // 4
    freqs = torch.exp(-math.log(10000.0) * torch.arange(quarter, dtype=torch.float32) / quarter)
    ys = (torch.arange(h, dtype=torch.float32) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=torch.float32) + 0.5) / w * 2 * math.pi
    ey = torch.cat([torch.sin(ys[:, None] * freqs * 10), torch.cos(ys[:, None] * freqs * 10)], -1)
    ex = torch.cat([torch.sin(xs[:, None] * freqs * 10), torch.cos(xs[:, None] * freqs * 10)], -1)
    pe = torch.cat([ey[:, None, :].expand(h, w, -1), ex[None, :, :].expand(h, w, -1)], -1)
    out = torch.zeros(h, w, dim)
    out[..., : pe.shape[-1]] = pe
    return out.reshape(h * w, dim)


class BoxNet(nn.Module):
    def __init__(self, config: BoxNetConfig = BoxNetConfig()):
        super().__init__()
        self.config = config
        c = config
        self.feature_proj = nn.Conv2d(sum(c.feature_channels), c.d_model, 1)
        self.register_buffer("pos", sine_position_encoding(*c.feature_hw, c.d_model), persistent=False)
        enc = nn.TransformerEncoderLayer(c.d_model, c.nhead, c.dim_ff, dropout=0.0, batch_first=True)
        dec = nn.TransformerDecoderLayer(c.d_model, c.nhead, c.dim_ff, dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(enc, c.enc_layers, enable_nested_tensor=False)
        self.decoder = nn.TransformerDecoder(dec, c.dec_layers)
        self.placeholder = nn.Parameter(torch.zeros(c.text_dim))
        self.query_proj = nn.Linear(c.text_dim, c.d_model)
        self.register_buffer("capacity", torch.tensor(c.M))
        for p in self.parameters():
            if p.dim() > 1:
                nn.init.xavier_uniform_(p)
        nn.init.normal_(self.placeholder, std=1.0)
        # a single linear layer converges too slowly to localize within the training budget;
        # built after the xavier pass so the default init keeps the sigmoid out of saturation
        self.box_head = nn.Sequential(nn.Linear(c.d_model, c.d_model), nn.ReLU(),
                                      nn.Linear(c.d_model, c.d_model), nn.ReLU(),
                                      nn.Linear(c.d_model, 4))

    # -- feature extraction -----------------------------------------------------
    def extract_features(self, activations: Sequence[torch.Tensor], t=None) -> FeatureTensor:
        if not activations:
            raise ValueError("need at least one activation map")
        target = self.config.feature_hw
        resized, sources = [], []
        for a in activations:
            if a.dim() != 4:
                raise ValueError(f"activation must be (B, C, H, W), got {tuple(a.shape)}")
            if not torch.isfinite(a).all():
                raise ValueError("non-finite activations")
            sources.append(tuple(a.shape[-2:]))
            if tuple(a.shape[-2:]) != target:
                a = F.interpolate(a, size=target, mode="bilinear", align_corners=False)
            resized.append(a)
        x = torch.cat(resized, dim=1)
        if x.shape[1] != self.feature_proj.in_channels:
            raise ConfigMismatchError(f"activations have {x.shape[1]} channels, "
                                      f"BoxNet expects {self.feature_proj.in_channels}")
        return FeatureTensor(self.feature_proj(x), t, sources)

    # -- queries ----------------------------------------------------------------
    def encode_entities(self, spans: Sequence[EntitySpan], text_encoder, category_ids=None) -> EntityQuerySet:
        M = self.config.M
        if len(spans) > M:
            raise ValueError(f"{len(spans)} entities exceed query capacity {M}")
        rows = [text_encoder.encode_phrase(s.phrase) for s in spans]
        rows += [self.placeholder] * (M - len(spans))
        return EntityQuerySet(torch.stack(rows), len(spans), list(category_ids or []))

    def stack_queries(self, queries: Sequence[EntityQuerySet]) -> torch.Tensor:
        return torch.stack([q.embeddings for q in queries])

    # -- prediction -------------------------------------------------------------
    def forward(self, features: torch.Tensor, query_embeddings: torch.Tensor) -> torch.Tensor:
        """(B, C_f, H, W) features and (B, M, text_dim) queries -> (B, M, 4) boxes in (0, 1)."""
        c = self.config
        if features.shape[1] != c.d_model or tuple(features.shape[-2:]) != c.feature_hw:
            raise ConfigMismatchError(f"feature shape {tuple(features.shape[1:])} does not match config")
        if query_embeddings.shape[1] != c.M or query_embeddings.shape[2] != c.text_dim:
            raise ConfigMismatchError(f"queries {tuple(query_embeddings.shape[1:])} do not match config")
        src = features.flatten(2).transpose(1, 2) + self.pos
        memory = self.encoder(src)
        hs = self.decoder(self.query_proj(query_embeddings), memory)
        return torch.sigmoid(self.box_head(hs))

    def predict_boxes(self, feature: FeatureTensor, queries: EntityQuerySet | Sequence[EntityQuerySet]):
        """Boxes for the first N queries of each sample.

        A single query set returns a list of N Boxes; a sequence of query sets
        (one per batch row) returns a list of such lists.
        """
        single = isinstance(queries, EntityQuerySet)
        qs = [queries] if single else list(queries)
        if feature.data.shape[0] != len(qs):
            raise ConfigMismatchError(f"{feature.data.shape[0]} feature maps for {len(qs)} query sets")
        with torch.no_grad():
            out = self(feature.data, self.stack_queries(qs)).double().cpu()
        boxes = [[Box.from_seq(_interior(row)) for row in out[b, : q.n_entities].tolist()] for b, q in enumerate(qs)]
        return boxes[0] if single else boxes


def _interior(row):
    # float32 sigmoid can round to exactly 0 or 1; keep the Box invariant strict
    eps = 1e-6
    return [min(max(v, eps), 1 - eps) for v in row]


@dataclass
class BoxNetCheckpoint:
    config: BoxNetConfig
    state_dict: dict
    training_meta: dict = field(default_factory=dict)

    def build(self) -> BoxNet:
        net = BoxNet(self.config)
        net.load_state_dict(self.state_dict)
        net.eval()
        return net

    @classmethod
    def from_model(cls, net: BoxNet, training_meta: dict | None = None) -> "BoxNetCheckpoint":
        return cls(net.config, {k: v.detach().clone() for k, v in net.state_dict().items()}, dict(training_meta or {}))

    def to_bytes(self, extra: dict | None = None) -> bytes:
        header = json.dumps({"config": self.config.to_dict(), "training_meta": self.training_meta},
                            sort_keys=True, indent=1).encode("utf-8")
        blob = io.BytesIO()
        torch.save({"state_dict": self.state_dict, "extra": extra or {}}, blob)
        return CKPT_MAGIC + b"\n" + str(len(header)).encode() + b"\n" + header + blob.getvalue()

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        Path(path).write_bytes(self.to_bytes(extra))

    @classmethod
    def from_bytes(cls, data: bytes, with_extra: bool = False):
        magic, rest = data.split(b"\n", 1)
        if magic != CKPT_MAGIC:
            raise ValueError("not a BoxNet checkpoint (bad magic)")
        size, rest = rest.split(b"\n", 1)
        header = json.loads(rest[: int(size)].decode("utf-8"))
        payload = torch.load(io.BytesIO(rest[int(size):]), map_location="cpu", weights_only=False)
        ckpt = cls(BoxNetConfig.from_dict(header["config"]), payload["state_dict"], header["training_meta"])
        if int(ckpt.state_dict["capacity"]) != ckpt.config.M:
            raise ConfigMismatchError("config M does not match the query capacity stored with the weights")
        return (ckpt, payload.get("extra", {})) if with_extra else ckpt

    @classmethod
    def load(cls, path: str | Path, with_extra: bool = False):
        return cls.from_bytes(Path(path).read_bytes(), with_extra)
