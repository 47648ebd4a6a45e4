from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class SchedulerConfig:
    T: int = 50
    schedule: str = "cosine"
    cosine_s: float = 0.008
    max_beta: float = 0.999
    sampler: str = "ddim"  # "ddim" (deterministic) or "ancestral"

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.sampler not in ("ddim", "ancestral"):
            raise ValueError(f"unknown sampler {self.sampler!r}")


class NoiseScheduler:
    """Discrete cosine schedule with ``alpha_bar[0] == 1`` and ``alpha_bar[T]`` near 0."""

    def __init__(self, config: SchedulerConfig = SchedulerConfig()):
        self.config = config
        T, s = config.T, config.cosine_s

        def f(t):
            return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2

        alpha_bar = [1.0]
        for t in range(1, T + 1):
            beta = min(1 - f(t) / f(t - 1), config.max_beta)
            alpha_bar.append(alpha_bar[-1] * (1 - beta))
        self.alpha_bar = torch.tensor(alpha_bar, dtype=torch.float64)

    @property
    def T(self) -> int:
        return self.config.T

    def _check(self, t):
        t = torch.as_tensor(t)
        if (t < 0).any() or (t > self.T).any():
            raise ValueError(f"timestep out of range [0, {self.T}]")
        return t

    def add_noise(self, z0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
        t = self._check(t)
        ab = self.alpha_bar[t].to(z0.dtype)
        if ab.ndim:
            ab = ab.view(-1, *([1] * (z0.ndim - 1)))
        return ab.sqrt() * z0 + (1 - ab).sqrt() * noise

    def step(self, eps: torch.Tensor, t: int, z: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        """One reverse step t -> t-1."""
        ab_t = float(self.alpha_bar[t])
        ab_prev = float(self.alpha_bar[t - 1])
        z0 = (z - math.sqrt(1 - ab_t) * eps) / math.sqrt(ab_t)
        z0 = z0.clamp(-6, 6)
        if self.config.sampler == "ddim":
            eps_hat = (z - math.sqrt(ab_t) * z0) / math.sqrt(1 - ab_t)
            return math.sqrt(ab_prev) * z0 + math.sqrt(1 - ab_prev) * eps_hat
        beta = 1 - ab_t / ab_prev
        mean = (math.sqrt(ab_prev) * beta / (1 - ab_t)) * z0 + (math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab_t)) * z
        if t == 1:
            return mean
        var = beta * (1 - ab_prev) / (1 - ab_t)
        noise = torch.randn(z.shape, generator=generator, dtype=z.dtype)
        return mean + math.sqrt(var) * noise


def add_noise(z0: torch.Tensor, t: int, seed: int, scheduler: NoiseScheduler | None = None) -> torch.Tensor:
    """Forward diffusion q(z_t | z_0) with noise drawn from ``seed``."""
    scheduler = scheduler or NoiseScheduler()
    gen = torch.Generator().manual_seed(seed)
    noise = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    return scheduler.add_noise(z0, t, noise)
