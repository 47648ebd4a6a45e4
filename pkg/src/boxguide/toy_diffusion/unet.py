"""Small latent U-Net with self- and cross-attention at 16x16 and 8x8.

Every attention layer materializes its post-softmax map and passes it through
the registered interception hooks before multiplying by the values, which is
the contract the attention controller relies on.
"""
from __future__ import annotations

import math
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

AttentionHook = Callable[[torch.Tensor, "Attention"], torch.Tensor]


class HookHandle:
    def __init__(self, hooks: list, fn):
        self._hooks = hooks
        self._fn = fn

    @property
    def active(self) -> bool:
        return self._fn in self._hooks

    def remove(self) -> None:
        if self._fn in self._hooks:
            self._hooks.remove(self._fn)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.remove()


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half).to(t.device)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class Attention(nn.Module):
    def __init__(self, dim: int, context_dim: int | None, heads: int, kind: str, hw: tuple[int, int], name: str):
        super().__init__()
        self.kind, self.hw, self.name, self.heads = kind, hw, name, heads
        self.scale = (dim // heads) ** -0.5
        kv_dim = context_dim or dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(kv_dim, dim, bias=False)
        self.to_v = nn.Linear(kv_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        self.hooks: list[AttentionHook] = []

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        b, n, c = x.shape
        ctx = x if context is None else context
        h = self.heads
        q = self.to_q(x).view(b, n, h, -1).transpose(1, 2)
        k = self.to_k(ctx).view(b, ctx.shape[1], h, -1).transpose(1, 2)
        v = self.to_v(ctx).view(b, ctx.shape[1], h, -1).transpose(1, 2)
        probs = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
        for hook in list(self.hooks):
            probs = hook(probs, self)
        out = (probs @ v).transpose(1, 2).reshape(b, n, c)
        return self.to_out(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, context_dim: int, heads: int, hw: tuple[int, int], name: str):
        super().__init__()
        self.norm_in = nn.GroupNorm(8, dim)
        self.proj_in = nn.Conv2d(dim, dim, 1)
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, None, heads, "self", hw, f"{name}.self")
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, context_dim, heads, "cross", hw, f"{name}.cross")
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))
        self.proj_out = nn.Conv2d(dim, dim, 1)

    def forward(self, x, context):
        b, c, hh, ww = x.shape
        y = self.proj_in(self.norm_in(x)).flatten(2).transpose(1, 2)  # row-major: index = y * W + x
        y = y + self.self_attn(self.norm1(y))
        y = y + self.cross_attn(self.norm2(y), context)
        y = y + self.ff(self.norm3(y))
        y = y.transpose(1, 2).reshape(b, c, hh, ww)
        return x + self.proj_out(y)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, 1, 1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class ToyUNet(nn.Module):
    """Epsilon-prediction U-Net over (4, 16, 16) latents.

    ``forward(..., return_features=True)`` also returns the outputs of the two
    down and two up stages (16x16, 8x8, 8x8, 16x16), the maps BoxNet reads.
    """

    def __init__(self, latent_channels: int = 4, width: int = 48, context_dim: int = 64,
                 heads: int = 2, latent_hw: int = 16):
        super().__init__()
        w1, w2 = width, width * 2
        r1, r2 = (latent_hw, latent_hw), (latent_hw // 2, latent_hw // 2)
        self.temb_dim = width * 2
        self.time_mlp = nn.Sequential(nn.Linear(width, self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim))
        self.time_freq_dim = width
        self.conv_in = nn.Conv2d(latent_channels, w1, 3, 1, 1)
        self.down1_res = ResBlock(w1, w1, self.temb_dim)
        self.down1_attn = TransformerBlock(w1, context_dim, heads, r1, "down1")
        self.downsample = nn.Conv2d(w1, w2, 3, 2, 1)
        self.down2_res = ResBlock(w2, w2, self.temb_dim)
        self.down2_attn = TransformerBlock(w2, context_dim, heads, r2, "down2")
        self.mid_res = ResBlock(w2, w2, self.temb_dim)
        self.up1_res = ResBlock(w2 * 2, w2, self.temb_dim)
        self.up1_attn = TransformerBlock(w2, context_dim, heads, r2, "up1")
        self.upsample = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(w2, w1, 3, 1, 1))
        self.up2_res = ResBlock(w1 * 2, w1, self.temb_dim)
        self.up2_attn = TransformerBlock(w1, context_dim, heads, r1, "up2")
        self.norm_out = nn.GroupNorm(8, w1)
        self.conv_out = nn.Conv2d(w1, latent_channels, 3, 1, 1)
        self.feature_channels = [w1, w2, w2, w1]

    def attention_layers(self) -> list[Attention]:
        return [m for m in self.modules() if isinstance(m, Attention)]

    def attention_resolutions(self) -> set[tuple[int, int]]:
        return {layer.hw for layer in self.attention_layers()}

    def add_attention_hook(self, fn: AttentionHook, kinds=("self", "cross")) -> list[HookHandle]:
        handles = []
        for layer in self.attention_layers():
            if layer.kind in kinds:
                layer.hooks.append(fn)
                handles.append(HookHandle(layer.hooks, fn))
        return handles

    def hook_count(self) -> int:
        return sum(len(layer.hooks) for layer in self.attention_layers())

    def forward(self, z, t, context, return_features: bool = False):
        temb = self.time_mlp(timestep_embedding(t, self.time_freq_dim))
        h = self.conv_in(z)
        d1 = self.down1_attn(self.down1_res(h, temb), context)
        d2 = self.down2_attn(self.down2_res(self.downsample(d1), temb), context)
        m = self.mid_res(d2, temb)
        u1 = self.up1_attn(self.up1_res(torch.cat([m, d2], 1), temb), context)
        u2 = self.up2_attn(self.up2_res(torch.cat([self.upsample(u1), d1], 1), temb), context)
        eps = self.conv_out(F.silu(self.norm_out(u2)))
        if return_features:
            return eps, [d1, d2, u1, u2]
        return eps
