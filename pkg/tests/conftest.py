from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch

from stavc.data import SyntheticSource
from stavc.training import TrainConfig, evaluate_loss, sample_batch, train
from stavc.transforms import Variant, VariantConfig, VideoModel

torch.set_num_threads(1)


def fd_grad(fn, x: torch.Tensor, step: float = 1e-3, indices=None) -> torch.Tensor:
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``x`` (perturbed in place)."""
    grad = torch.zeros_like(x)
    flat = x.data.view(-1)
    g = grad.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + step
            fp = float(fn())
            flat[i] = orig - step
            fm = float(fn())
            flat[i] = orig
            g[i] = (fp - fm) / (2 * step)
    return grad


def max_rel_err(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-6) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)."""
    a, b = a.detach().double(), b.detach().double()
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
    return float(((a - b).abs() / denom).max())


def dense_conv_same_replicate(img: np.ndarray, kernel2d: np.ndarray) -> np.ndarray:
    """Direct 2-D correlation with edge replication, loops over taps."""
    r = kernel2d.shape[0] // 2
    c, h, w = img.shape
    padded = np.pad(img, ((0, 0), (r, r), (r, r)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(kernel2d.shape[0]):
        for dx in range(kernel2d.shape[1]):
            out += kernel2d[dy, dx] * padded[:, dy:dy + h, dx:dx + w]
    return out


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize with clamped sampling, pixel by pixel."""
    c, h, w = img.shape
    out = np.zeros((c, out_h, out_w))
    for i in range(out_h):
        y = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(np.floor(y)); y1 = min(y0 + 1, h - 1); fy = y - y0
        for j in range(out_w):
            x = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(np.floor(x)); x1 = min(x0 + 1, w - 1); fx = x - x0
            out[:, i, j] = ((1 - fy) * ((1 - fx) * img[:, y0, x0] + fx * img[:, y0, x1])
                            + fy * ((1 - fx) * img[:, y1, x0] + fx * img[:, y1, x1]))
    return out


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def natural_images():
    skimage_data = pytest.importorskip("skimage.data")
    out = []
    for name in ("astronaut", "coffee", "chelsea"):
        arr = getattr(skimage_data, name)()[:128, :128].astype(np.float64) / 255.0
        out.append((name, torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))))
    return out


# -- trained models shared across test files ---------------------------------
#
# Training is the expensive part of the suite, so each model is trained once
# per session. The "shallow" models downsample 4x instead of 16x; at a few
# hundred steps the default architecture still codes little more than the
# mean colour, which makes rate-dependent properties unobservable.

SHALLOW = dict(channels=16, latent_channels=8, hyper_channels=4, gate_channels=8, blocks=2)
COMBOS = [(v, sp) for v in Variant for sp in (False, True) if not (v is Variant.TAT and sp)]
ZOO_BETA = 0.01
BETA_LADDER = (0.005, 0.01, 0.02, 0.04, 0.08)
DESK_STEPS = 2000
DESK_SNAPSHOT = 25


def train_shallow(variant, structured: bool, beta: float, out: Path, steps: int = 200) -> Path:
    model = VideoModel.create(VariantConfig(variant, structured_prior=structured, **SHALLOW), seed=0)
    cfg = TrainConfig(beta=beta, steps=steps, crop=32, final_crop=32, batch=2, lr_initial=1e-3,
                      lr_decayed=1e-4, log_every=0)
    return train(model, SyntheticSource(size=64, seed=0), cfg, out).checkpoint


@pytest.fixture(scope="session")
def trained_zoo(tmp_path_factory) -> dict:
    """Every variant x prior combination, shallow, trained at ``ZOO_BETA``."""
    root = tmp_path_factory.mktemp("zoo")
    return {(v.name, sp): train_shallow(v, sp, ZOO_BETA, root / f"{v.name}_{int(sp)}")
            for v, sp in COMBOS}


@pytest.fixture(scope="session")
def beta_ladder(tmp_path_factory, trained_zoo) -> list[Path]:
    """Shallow SSF checkpoints, one per beta in ``BETA_LADDER``."""
    root = tmp_path_factory.mktemp("ladder")
    return [trained_zoo[("SSF", False)] if b == ZOO_BETA else train_shallow("SSF", False, b, root / str(b))
            for b in BETA_LADDER]


@dataclass
class DeskRun:
    out: Path
    checkpoint: Path
    config: TrainConfig
    curve: list
    initial_losses: list
    final_losses: list

    @property
    def ratio(self) -> float:
        return sum(self.final_losses) / sum(self.initial_losses)


DESK_EVAL_BATCHES = 8


def desk_eval_batches() -> list[torch.Tensor]:
    # clips the training source never produces (different source seed)
    src = SyntheticSource(size=96, seed=999)
    return [sample_batch(src, TrainConfig(batch=4), i, crop=64) for i in range(DESK_EVAL_BATCHES)]


def desk_losses(model: VideoModel, batches: list[torch.Tensor], beta: float) -> list[float]:
    return [float(evaluate_loss(model, b, beta).loss) for b in batches]


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory) -> DeskRun:
    """Default-architecture STAT-SSF, default TrainConfig (beta 0.01, 2000 steps)."""
    out = tmp_path_factory.mktemp("desk")
    cfg = TrainConfig(steps=DESK_STEPS, seed=0, log_every=0, checkpoint_every=DESK_SNAPSHOT)
    model = VideoModel.create(VariantConfig("STAT_SSF"), seed=0)
    batches = desk_eval_batches()
    initial = desk_losses(model, batches, cfg.beta)
    res = train(model, SyntheticSource(size=96, seed=0), cfg, out)
    final = desk_losses(model, batches, cfg.beta)
    return DeskRun(out, res.checkpoint, cfg, res.curve, initial, final)
