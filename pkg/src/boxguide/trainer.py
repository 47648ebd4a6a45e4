"""Train BoxNet on noised latents from a frozen toy denoiser."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .boxnet import BoxNet, BoxNetCheckpoint, BoxNetConfig
from .matching import Lambdas, box_loss_torch, lexicographic_assignment, match_cost_matrix_torch
from .prompt_parser import EntityLexicon, EntitySpan, parse_entities
from .toy_diffusion.autoencoder import to_tensor
from .toy_diffusion.shapes import ShapesDataset
from .toy_diffusion.stack import ToyStack

log = logging.getLogger(__name__)


class FrozenDenoiserError(RuntimeError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 4e-4
    weight_decay: float = 1e-4
    warmup_steps: int = 200
    total_steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    lambda_class: float = 100.0
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    M: int = 8
    shuffle_attr_frac: float = 0.2
    checkpoint_every: int = 500
    min_lr_frac: float = 0.05

    def __post_init__(self):
        if self.total_steps <= 0 or self.warmup_steps < 0 or self.batch_size <= 0:
            raise ValueError("steps and batch size must be positive")
        if min(self.lambda_class, self.lambda_iou, self.lambda_l1) < 0:
            raise ValueError("loss weights must be nonnegative")

    @property
    def lambdas(self) -> Lambdas:
        return Lambdas(self.lambda_class, self.lambda_iou, self.lambda_l1)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        defaults = cls()
        known = {f.name for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ValueError(f"unknown training option {key!r}")
            kw[key] = type(getattr(defaults, key))(raw)
        return cls(**kw)


def learning_rate(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to ``min_lr_frac * lr``."""
    if config.warmup_steps and step < config.warmup_steps:
        return config.lr * step / config.warmup_steps
    span = max(1, config.total_steps - config.warmup_steps)
    progress = min(1.0, (step - config.warmup_steps) / span)
    floor = config.min_lr_frac
    return config.lr * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * progress)))


@dataclass
class TrainSample:
    latent: torch.Tensor  # (4, 16, 16) clean latent
    caption: str
    spans: list[EntitySpan]
    query_categories: list[int]
    gt_boxes: torch.Tensor  # (n, 4)
    gt_categories: list[int]


def entity_category(span: EntitySpan, lexicon: EntityLexicon) -> int:
    """Class label assigned to a query: the lexicon class of its phrase's head noun."""
    return lexicon.category_id(span.head_noun)


def shuffle_attributes(caption: str, colors: Sequence[str], rng: np.random.Generator) -> str:
    """Permute the color words among the caption's entity phrases (a derangement when possible)."""
    if len(colors) < 2:
        return caption
    perm = list(range(len(colors)))
    while perm == sorted(perm):
        perm = list(rng.permutation(len(colors)))
    words = caption.split(" ")
    order = [i for i, w in enumerate(words) if w in colors]
    swapped = [words[order[p]] for p in perm]
    for i, w in zip(order, swapped):
        words[i] = w
    return " ".join(words)


@torch.no_grad()
def encode_dataset(stack: ToyStack, dataset: ShapesDataset, chunk: int = 512) -> torch.Tensor:
    imgs = to_tensor(dataset.images)
    return torch.cat([stack.autoencoder.encode(imgs[i:i + chunk]) for i in range(0, len(imgs), chunk)])


class BoxNetTrainer:
    def __init__(self, stack: ToyStack, dataset: ShapesDataset, config: TrainConfig = TrainConfig(),
                 boxnet_config: BoxNetConfig | None = None, lexicon: EntityLexicon | None = None):
        self.stack = stack
        self.dataset = dataset
        self.config = config
        self.lexicon = lexicon or EntityLexicon.default()
        if boxnet_config is None:
            boxnet_config = BoxNetConfig(feature_channels=tuple(stack.unet.feature_channels),
                                         feature_hw=(stack.config.latent_hw,) * 2,
                                         text_dim=stack.config.text_dim, M=config.M)
        torch.manual_seed(config.seed)
        self.boxnet = BoxNet(boxnet_config)
        self.optimizer = torch.optim.AdamW(self.boxnet.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        self.step = 0
        self.history: list[tuple[int, float, float]] = []
        self.latents = encode_dataset(stack, dataset)
        self._parsed: dict[str, list[EntitySpan]] = {}
        self.dump_costs = False

    # -- data -------------------------------------------------------------------
    def _spans(self, caption: str) -> list[EntitySpan]:
        if caption not in self._parsed:
            parsed = parse_entities(caption, self.lexicon, self.stack.text_encoder.tokenizer, self.config.M)
            self._parsed[caption] = list(parsed.spans)
        return self._parsed[caption]

    def sample(self, index: int, rng: np.random.Generator | None = None, shuffle: bool = False,
               dataset: ShapesDataset | None = None, latents: torch.Tensor | None = None) -> TrainSample:
        ds = dataset if dataset is not None else self.dataset
        latents = latents if latents is not None else self.latents
        caption = ds.captions[index]
        if shuffle and rng is not None:
            caption = shuffle_attributes(caption, ds.colors[index], rng)
        spans = self._spans(caption)
        return TrainSample(
            latents[index], caption, spans, [entity_category(s, self.lexicon) for s in spans],
            torch.as_tensor(np.asarray(ds.boxes[index]), dtype=torch.float32),
            [self.lexicon.category_id(s) for s in ds.shapes[index]],
        )

    def _step_rng(self, step: int):
        seed = [self.config.seed, step]
        return np.random.default_rng(seed), torch.Generator().manual_seed(int(np.random.SeedSequence(seed).generate_state(1)[0]))

    def batch(self, step: int) -> tuple[list[TrainSample], torch.Tensor, torch.Tensor]:
        """Samples, timesteps and noise for a step; a pure function of (seed, step)."""
        rng, gen = self._step_rng(step)
        idx = rng.integers(0, len(self.dataset), self.config.batch_size)
        shuffle = rng.random(self.config.batch_size) < self.config.shuffle_attr_frac
        samples = [self.sample(int(i), rng, bool(s)) for i, s in zip(idx, shuffle)]
        t = torch.randint(1, self.stack.scheduler.T + 1, (len(samples),), generator=gen)
        noise = torch.randn((len(samples), *self.stack.latent_shape), generator=gen)
        return samples, t, noise

    # -- forward ----------------------------------------------------------------
    def features(self, samples: Sequence[TrainSample], t: torch.Tensor, noise: torch.Tensor):
        z0 = torch.stack([s.latent for s in samples])
        zt = self.stack.scheduler.add_noise(z0, t, noise)
        with torch.no_grad():
            ctx = self.stack.text_encoder([s.caption for s in samples])
            _, acts = self.stack.unet(zt, t, ctx, return_features=True)
        return self.boxnet.extract_features(acts, t)

    def predict(self, samples, t, noise) -> torch.Tensor:
        feature = self.features(samples, t, noise)
        emb = torch.stack([self._query_tensor(s.spans) for s in samples])
        return self.boxnet(feature.data, emb)

    def _query_tensor(self, spans):
        # phrase rows are constants; placeholder rows stay attached so the placeholder trains
        M = self.boxnet.config.M
        with torch.no_grad():
            rows = [self.stack.text_encoder.encode_phrase(s.phrase) for s in spans]
        return torch.stack(rows + [self.boxnet.placeholder] * (M - len(rows)))

    def loss(self, pred: torch.Tensor, samples: Sequence[TrainSample]) -> torch.Tensor:
        lambdas = self.config.lambdas
        per_sample = []
        for b, s in enumerate(samples):
            n = len(s.spans)
            p = pred[b, :n]
            with torch.no_grad():
                cost = match_cost_matrix_torch(p.double(), s.query_categories, s.gt_boxes.double(),
                                               s.gt_categories, lambdas)
            pairs = lexicographic_assignment(cost.numpy())
            if self.dump_costs and b == 0 and self.step % 100 == 0:
                log.info("step %d cost matrix for %r:\n%s\nassignment %s", self.step, s.caption,
                         np.array2string(cost.numpy(), precision=3), pairs)
            if not pairs:
                per_sample.append(pred.sum() * 0)
                continue
            pi = torch.tensor([i for i, _ in pairs])
            gi = torch.tensor([j for _, j in pairs])
            per_sample.append(box_loss_torch(p[pi], s.gt_boxes[gi], lambdas).sum())
        return torch.stack(per_sample).mean()

    def train_step(self, samples=None, t=None, noise=None) -> float:
        if samples is None:
            samples, t, noise = self.batch(self.step)
        lr = learning_rate(self.step, self.config)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.boxnet.train()
        pred = self.predict(samples, t, noise)
        loss = self.loss(pred, samples)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss at step {self.step}")
        self.optimizer.zero_grad()
        loss.backward()
        self._guard_frozen()
        self.optimizer.step()
        value = float(loss.detach())
        self.history.append((self.step, value, lr))
        self.step += 1
        return value

    def _guard_frozen(self) -> None:
        for module in self.stack.modules():
            for name, p in module.named_parameters():
                if p.requires_grad or p.grad is not None:
                    raise FrozenDenoiserError(f"denoiser parameter {name} is trainable or received a gradient")

    # -- loop -------------------------------------------------------------------
    def train(self, out_dir: str | Path | None = None, run_meta: dict | None = None) -> BoxNetCheckpoint:
        cfg = self.config
        out = Path(out_dir) if out_dir else None
        if out:
            out.mkdir(parents=True, exist_ok=True)
        t0 = time.time()
        while self.step < cfg.total_steps:
            try:
                value = self.train_step()
            except NonFiniteLossError:
                if out:
                    (out / "nonfinite_dump.json").write_text(json.dumps({
                        "step": self.step, "recent": self.history[-20:]}), encoding="utf-8")
                raise
            if self.step % 100 == 0:
                recent = np.mean([h[1] for h in self.history[-100:]])
                log.info("step %d loss %.4f lr %.2e (%.0fs)", self.step, recent, self.history[-1][2], time.time() - t0)
            if out and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                self.save_state(out / f"step{self.step:06d}.ckpt", run_meta)
        ckpt = self.checkpoint(run_meta)
        if out:
            ckpt.save(out / "boxnet.ckpt")
            self.write_loss_curve(out / "loss_curve.csv", (run_meta or {}).get("config_hash"))
        return ckpt

    def checkpoint(self, run_meta: dict | None = None) -> BoxNetCheckpoint:
        losses = [h[1] for h in self.history]
        meta = {
            "steps": self.step, "seed": self.config.seed, "dataset_id": self.dataset.dataset_id,
            "train_config": asdict(self.config),
            "loss_first100": float(np.mean(losses[:100])) if losses else None,
            "loss_last100": float(np.mean(losses[-100:])) if losses else None,
        }
        meta.update(run_meta or {})
        return BoxNetCheckpoint.from_model(self.boxnet, meta)

    def save_state(self, path: str | Path, run_meta: dict | None = None) -> None:
        self.checkpoint(run_meta).save(path, extra={"optimizer": self.optimizer.state_dict(),
                                                    "step": self.step, "history": self.history})

    def load_state(self, path: str | Path) -> None:
        ckpt, extra = BoxNetCheckpoint.load(path, with_extra=True)
        self.boxnet.load_state_dict(ckpt.state_dict)
        self.optimizer.load_state_dict(extra["optimizer"])
        self.step = int(extra["step"])
        self.history = [tuple(h) for h in extra["history"]]

    def write_loss_curve(self, path: str | Path, config_hash: str | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            if config_hash:
                f.write(f"# config_hash={config_hash}\n")
            w = csv.writer(f)
            w.writerow(["step", "loss", "lr"])
            for step, loss, lr in self.history:
                w.writerow([step, f"{loss:.6f}", f"{lr:.6e}"])


def train(dataset: ShapesDataset, config: TrainConfig = TrainConfig(), stack: ToyStack | None = None,
          out_dir: str | Path | None = None, resume_from: str | Path | None = None,
          run_meta: dict | None = None) -> BoxNetCheckpoint:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    trainer = BoxNetTrainer(stack or ToyStack.load(), dataset, config)
    if resume_from is not None:
        trainer.load_state(resume_from)
    return trainer.train(out_dir, run_meta)


def box_iou(a: np.ndarray, b: np.ndarray) -> float:
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


@torch.no_grad()
def evaluate_iou(trainer: BoxNetTrainer, dataset: ShapesDataset, t_max: int, seed: int = 123,
                 batch: int = 50) -> float:
    """Mean IoU of class-matched predicted/GT pairs on ``dataset`` at timesteps 1..t_max."""
    latents = encode_dataset(trainer.stack, dataset)
    gen = torch.Generator().manual_seed(seed)
    trainer.boxnet.eval()
    ious = []
    for start in range(0, len(dataset), batch):
        samples = [trainer.sample(i, dataset=dataset, latents=latents)
                   for i in range(start, min(start + batch, len(dataset)))]
        t = torch.randint(1, t_max + 1, (len(samples),), generator=gen)
        noise = torch.randn((len(samples), *trainer.stack.latent_shape), generator=gen)
        pred = trainer.predict(samples, t, noise).double()
        for b, s in enumerate(samples):
            n = len(s.spans)
            cost = match_cost_matrix_torch(pred[b, :n], s.query_categories, s.gt_boxes.double(),
                                           s.gt_categories, trainer.config.lambdas)
            for i, j in lexicographic_assignment(cost.numpy()):
                ious.append(box_iou(pred[b, i].numpy(), s.gt_boxes[j].double().numpy()))
    return float(np.mean(ious))
