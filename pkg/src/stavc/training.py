"""Rate-distortion training: loss, Adam, schedule, loop."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from . import tensor as T
from .data import SyntheticSource, generate_clip
from .entropy import quantize_train
from .errors import NumericError, UsageError
from .transforms import VideoModel

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    beta: float = 0.01
    steps: int = 2000
    lr_initial: float = 1e-4
    lr_decayed: float = 1e-5
    decay_step: int | None = None  # defaults to 85% of steps
    crop: int = 64
    final_crop: int = 96
    final_fraction: float = 0.05
    frames_per_clip: int = 3
    batch: int = 4
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise UsageError("beta must be non-negative")
        if self.frames_per_clip < 2:
            raise UsageError("frames_per_clip must be at least 2")
        if self.steps < 0 or self.batch < 1:
            raise UsageError("steps must be >= 0 and batch >= 1")
        if self.decay_step is None:
            self.decay_step = int(round(0.85 * self.steps))

    def lr_at(self, step: int) -> float:
        return self.lr_initial if step < self.decay_step else self.lr_decayed

    def crop_at(self, step: int) -> int:
        final_start = self.steps - int(round(self.final_fraction * self.steps))
        return self.final_crop if self.final_fraction > 0 and step >= final_start else self.crop

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() == ".toml":
            import tomli

            data = tomli.loads(text)
        else:
            data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossTerms:
    loss: Tensor
    distortion: Tensor
    rate: Tensor


def rd_loss(clip: Tensor, model: VideoModel, beta: float, gen: torch.Generator) -> LossTerms:
    """D + beta * R for a ``[N, T, 3, H, W]`` batch under the noise proxy.

    D is the MSE averaged over all frames; R is bits per pixel.
    """
    results = model(clip, lambda z: quantize_train(z, gen))
    n, t, _, h, w = clip.shape
    distortion = sum(((r.recon - clip[:, i]) ** 2).mean() for i, r in enumerate(results)) / t
    rate = sum(r.total_bits() for r in results) / (n * t * h * w)
    return LossTerms(distortion + beta * rate, distortion, rate)


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: list[Tensor]
    v: list[Tensor]

    @classmethod
    def zeros_like(cls, params: list[Tensor]) -> "AdamState":
        return cls(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adam_step(params: list[Tensor], grads: list[Tensor], state: AdamState, lr: float,
              betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS) -> AdamState:
    """In-place bias-corrected Adam update; returns the advanced state."""
    b1, b2 = betas
    if len(params) != len(state.m):
        raise UsageError("optimizer state does not match parameter list")
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


# -- batches ------------------------------------------------------------------

def sample_batch(source: SyntheticSource, cfg: TrainConfig, step: int,
                 crop: int | None = None) -> Tensor:
    """Deterministic ``[batch, frames, 3, crop, crop]`` batch for ``step``."""
    crop = crop or cfg.crop_at(step)
    if crop > source.size:
        raise UsageError(f"crop {crop} larger than synthetic frame size {source.size}")
    rng = np.random.default_rng([cfg.seed, step])
    clips = []
    for b in range(cfg.batch):
        clip = generate_clip(source, cfg.frames_per_clip, index=step * cfg.batch + b)
        top, left = (int(v) for v in rng.integers(0, source.size - crop + 1, size=2))
        clips.append(clip.crop(top, left, crop, crop).frames)
    return torch.stack(clips)


# -- loop ---------------------------------------------------------------------

@dataclass
class TrainResult:
    curve: list[dict]
    checkpoint: Path | None


CURVE_FIELDS = ("step", "loss", "D", "R", "lr")


def train(model: VideoModel, source: SyntheticSource, cfg: TrainConfig,
          out_dir: str | Path | None = None,
          on_step: Callable[[int, LossTerms], None] | None = None) -> TrainResult:
    """Optimise ``model`` in place; deterministic given ``cfg.seed``.

    Writes ``loss.csv`` and ``model.ckpt`` (plus periodic ``step_*.ckpt``) into
    ``out_dir`` when given.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = [p for p in model.parameters() if p.requires_grad]
    state = AdamState.zeros_like(params)
    noise = torch.Generator().manual_seed(cfg.seed + 1)
    curve: list[dict] = []
    csv_file = writer = None
    if out is not None:
        csv_file = open(out / "loss.csv", "w", newline="")
        writer = csv.DictWriter(csv_file, fieldnames=CURVE_FIELDS)
        writer.writeheader()
    try:
        for step in range(cfg.steps):
            batch = sample_batch(source, cfg, step)
            try:
                terms = rd_loss(batch, model, cfg.beta, noise)
                if not math.isfinite(terms.loss.item()):
                    raise NumericError(f"non-finite loss at step {step}")
                T.backward(terms.loss, params)
            except NumericError:
                _dump_failure(out, step, batch)
                raise
            lr = cfg.lr_at(step)
            adam_step(params, [p.grad for p in params], state, lr)
            row = {"step": step, "loss": terms.loss.item(), "D": terms.distortion.item(),
                   "R": terms.rate.item(), "lr": lr}
            curve.append(row)
            if writer is not None:
                writer.writerow(row)
            if on_step is not None:
                on_step(step, terms)
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d loss %.5f D %.5f R %.4f lr %g", step, row["loss"], row["D"],
                         row["R"], lr)
            if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                model.save(out / f"step_{step + 1:06d}.ckpt", beta=cfg.beta, step=step + 1)
    finally:
        if csv_file is not None:
            csv_file.close()
    ckpt = None
    if out is not None:
        ckpt = out / "model.ckpt"
        model.save(ckpt, beta=cfg.beta, step=cfg.steps, train=asdict(cfg))
    return TrainResult(curve, ckpt)


def _dump_failure(out: Path | None, step: int, batch: Tensor) -> None:
    if out is None:
        log.error("non-finite value at step %d; no output directory for a dump", step)
        return
    path = out / f"failed_batch_{step:06d}.npz"
    np.savez(path, batch=batch.numpy())
    log.error("non-finite value at step %d; offending batch written to %s", step, path)


def evaluate_loss(model: VideoModel, batch: Tensor, beta: float, seed: int = 1234) -> LossTerms:
    """rd_loss with a fixed noise draw, without gradients."""
    with torch.no_grad():
        return rd_loss(batch, model, beta, torch.Generator().manual_seed(seed))
