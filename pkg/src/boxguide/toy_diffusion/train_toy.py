"""One-off training of the toy backbone (autoencoder, then text encoder + U-Net)."""
from __future__ import annotations

import copy
import logging
import time

import numpy as np
import torch

from .autoencoder import to_tensor
from .shapes import ShapesDataset
from .stack import StackConfig, ToyStack

log = logging.getLogger(__name__)


def train_autoencoder(stack: ToyStack, images: torch.Tensor, steps: int, batch: int, lr: float,
                      gen: torch.Generator) -> float:
    ae = stack.autoencoder
    ae.train()
    for p in ae.parameters():
        p.requires_grad_(True)
    opt = torch.optim.AdamW(ae.parameters(), lr=lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    loss = torch.tensor(0.0)
    for step in range(steps):
        x = images[torch.randint(0, len(images), (batch,), generator=gen)]
        loss = (ae.decode(ae.encode(x)) - x).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 500 == 0:
            log.info("autoencoder step %d loss %.4f", step, loss.item())
    ae.eval()
    with torch.no_grad():
        lat = torch.cat([ae.encoder(images[i:i + 512] * 2 - 1) for i in range(0, min(len(images), 4096), 512)])
        ae.scale.fill_(1.0 / lat.std().item())
    return float(loss)


def train_denoiser(stack: ToyStack, latents: torch.Tensor, captions: list[str], steps: int, batch: int,
                   lr: float, gen: torch.Generator, uncond_prob: float = 0.1, ema_decay: float = 0.999,
                   warmup: int = 500) -> list[float]:
    unet, text = stack.unet, stack.text_encoder
    params = list(unet.parameters()) + list(text.parameters())
    for m in (unet, text):
        m.train()
    for p in params:
        p.requires_grad_(True)
    ema_unet = copy.deepcopy(unet)
    ema_text = copy.deepcopy(text)
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.01)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / warmup) * (0.5 * (1 + np.cos(np.pi * min(s, steps) / steps)) * 0.9 + 0.1))
    alpha_bar = stack.scheduler.alpha_bar.float()
    T = stack.scheduler.T
    losses = []
    t0 = time.time()
    for step in range(steps):
        idx = torch.randint(0, len(latents), (batch,), generator=gen)
        z0 = latents[idx]
        drop = torch.rand(batch, generator=gen) < uncond_prob
        prompts = ["" if d else captions[i] for d, i in zip(drop.tolist(), idx.tolist())]
        t = torch.randint(1, T + 1, (batch,), generator=gen)
        noise = torch.randn(z0.shape, generator=gen)
        ab = alpha_bar[t].view(-1, 1, 1, 1)
        zt = ab.sqrt() * z0 + (1 - ab).sqrt() * noise
        pred = unet(zt, t, text(prompts))
        loss = (pred - noise).pow(2).mean()
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        sched.step()
        with torch.no_grad():
            for src, dst in ((unet, ema_unet), (text, ema_text)):
                for p, q in zip(src.parameters(), dst.parameters()):
                    q.mul_(ema_decay).add_(p.detach(), alpha=1 - ema_decay)
        losses.append(loss.item())
        if step % 200 == 0:
            log.info("denoiser step %d loss %.4f (%.0fs)", step, float(np.mean(losses[-200:])), time.time() - t0)
    unet.load_state_dict(ema_unet.state_dict())
    text.load_state_dict(ema_text.state_dict())
    return losses


def train_toy_stack(n_scenes: int = 20000, seed: int = 0, ae_steps: int = 2000, unet_steps: int = 8000,
                    batch: int = 32, config: StackConfig = StackConfig()) -> ToyStack:
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    stack = ToyStack(config)
    data = ShapesDataset.generate(n_scenes, seed=seed)
    images = to_tensor(data.images)
    train_autoencoder(stack, images, ae_steps, batch, 2e-3, gen)
    with torch.no_grad():
        latents = torch.cat([stack.autoencoder.encode(images[i:i + 512]) for i in range(0, len(images), 512)])
    train_denoiser(stack, latents, data.captions, unet_steps, batch, 3e-4, gen)
    stack.trained = True
    stack.freeze()
    return stack


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser()
    parser.add_argument("--out", required=True)
    parser.add_argument("--scenes", type=int, default=20000)
    parser.add_argument("--ae-steps", type=int, default=2000)
    parser.add_argument("--unet-steps", type=int, default=8000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    train_toy_stack(args.scenes, args.seed, args.ae_steps, args.unet_steps).save(args.out)
