from __future__ import annotations

import torch
from torch import nn


class Autoencoder(nn.Module):
    """64x64x3 image <-> 4x16x16 latent via 4x4 patches.

    Latents are rescaled by a dataset-level constant to roughly unit variance.
    """

    def __init__(self, latent_channels: int = 4, width: int = 96, patch: int = 4):
        super().__init__()
        self.patch = patch
        self.encoder = nn.Sequential(
            nn.Conv2d(3, width, patch, patch), nn.SiLU(),
            nn.Conv2d(width, width, 3, 1, 1), nn.SiLU(),
            nn.Conv2d(width, latent_channels, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, width, 3, 1, 1), nn.SiLU(),
            nn.Conv2d(width, width, 3, 1, 1), nn.SiLU(),
            nn.Conv2d(width, 3 * patch * patch, 1), nn.PixelShuffle(patch),
        )
        self.register_buffer("scale", torch.tensor(1.0))

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """images: (B, 3, 64, 64) in [0, 1]."""
        return self.encoder(images * 2 - 1) * self.scale

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(latents / self.scale))


def to_tensor(images_uint8) -> torch.Tensor:
    """(B, H, W, 3) uint8 array -> (B, 3, H, W) float in [0, 1]."""
    t = torch.as_tensor(images_uint8)
    return t.permute(0, 3, 1, 2).float() / 255.0


def to_images(x: torch.Tensor):
    """(B, 3, H, W) in [0, 1] -> (B, H, W, 3) float numpy."""
    return x.clamp(0, 1).permute(0, 2, 3, 1).detach().cpu().numpy()
