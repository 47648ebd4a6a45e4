"""The frozen toy text-to-image stack: autoencoder, text encoder, U-Net, scheduler."""
from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import torch

from .autoencoder import Autoencoder
from .scheduler import NoiseScheduler, SchedulerConfig
from .text import TextEncoder, build_vocab
from .unet import ToyUNet

STACK_MAGIC = "BOXGUIDE-TOYSTACK-v1"
DEFAULT_STACK = "toy_stack.pt"


@dataclass(frozen=True)
class StackConfig:
    latent_channels: int = 4
    latent_hw: int = 16
    image_size: int = 64
    ae_width: int = 96
    unet_width: int = 48
    heads: int = 2
    text_dim: int = 64
    max_tokens: int = 16
    T: int = 50
    guidance_scale: float = 1.0


class MissingWeightsError(RuntimeError):
    pass


class ToyStack:
    def __init__(self, config: StackConfig = StackConfig(), vocab: list[str] | None = None):
        self.config = config
        self.autoencoder = Autoencoder(config.latent_channels, config.ae_width)
        self.text_encoder = TextEncoder(vocab or build_vocab(), config.text_dim, config.max_tokens)
        self.unet = ToyUNet(config.latent_channels, config.unet_width, config.text_dim, config.heads, config.latent_hw)
        self.scheduler = NoiseScheduler(SchedulerConfig(T=config.T))
        self.trained = False
        self.freeze()

    def freeze(self) -> None:
        for module in self.modules():
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)

    def modules(self):
        return (self.autoencoder, self.text_encoder, self.unet)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        c = self.config
        return (c.latent_channels, c.latent_hw, c.latent_hw)

    def parameter_checksum(self) -> str:
        h = hashlib.sha256()
        for module in self.modules():
            for name, tensor in sorted(module.state_dict().items()):
                h.update(name.encode())
                h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.autoencoder.encode(images)

    def decode(self, z0: torch.Tensor) -> torch.Tensor:
        """(B, 4, 16, 16) latents -> (B, 3, 64, 64) images in [0, 1]."""
        if not self.trained:
            raise MissingWeightsError("toy decoder weights are not loaded")
        with torch.no_grad():
            return self.autoencoder.decode(z0)

    def context(self, prompts: list[str]) -> torch.Tensor:
        with torch.no_grad():
            return self.text_encoder(prompts)

    def state(self) -> dict:
        return {
            "magic": STACK_MAGIC,
            "config": asdict(self.config),
            "vocab": self.text_encoder.vocab,
            "autoencoder": self.autoencoder.state_dict(),
            "text_encoder": self.text_encoder.state_dict(),
            "unet": self.unet.state_dict(),
        }

    def save(self, path: str | Path) -> None:
        torch.save(self.state(), path)

    @classmethod
    def from_state(cls, state: dict) -> "ToyStack":
        if state.get("magic") != STACK_MAGIC:
            raise ValueError("not a toy stack checkpoint")
        stack = cls(StackConfig(**state["config"]), state["vocab"])
        stack.autoencoder.load_state_dict(state["autoencoder"])
        stack.text_encoder.load_state_dict(state["text_encoder"])
        stack.unet.load_state_dict(state["unet"])
        stack.trained = True
        stack.freeze()
        return stack

    @classmethod
    def load(cls, path: str | Path | None = None) -> "ToyStack":
        if path is None:
            ref = resources.files("boxguide.assets").joinpath(DEFAULT_STACK)
            if not ref.is_file():
                raise MissingWeightsError("bundled toy stack weights not found; run `boxguide train-toy`")
            data = io.BytesIO(ref.read_bytes())
        else:
            data = Path(path)
            if not data.is_file():
                raise MissingWeightsError(f"no toy stack at {path}")
        return cls.from_state(torch.load(data, map_location="cpu", weights_only=False))
