import csv
import math

import numpy as np
import pytest
import torch

from conftest import fd_grad, max_rel_err
from stavc.data import SyntheticSource
from stavc.errors import NumericError, UsageError
from stavc.training import (AdamState, TrainConfig, adam_step, evaluate_loss, rd_loss,
                            sample_batch, train)
from stavc.transforms import FrameResult, LatentBundle, VariantConfig, VideoModel

TINY = dict(channels=8, latent_channels=4, hyper_channels=2, gate_channels=4, blocks=2, depth=3)


def tiny_model(variant="STAT_SSF", seed=0, **kw):
    return VideoModel.create(VariantConfig(variant, **{**TINY, **kw}), seed=seed)


def tiny_cfg(**kw):
    base = dict(steps=6, crop=16, final_crop=24, batch=2, frames_per_clip=2, lr_initial=1e-3,
                lr_decayed=1e-4, log_every=0)
    base.update(kw)
    return TrainConfig(**base)


# -- Adam ---------------------------------------------------------------------

def scalar_adam_oracle(grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = 0.0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def bowl_oracle(x, lr, steps):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = 2 * x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        out.append(x)
    return out


def test_adam_quadratic_bowl():
    x = torch.tensor([1.0], dtype=torch.float64)
    state = AdamState.zeros_like([x])
    xs = []
    for _ in range(100):
        adam_step([x], [2 * x], state, 0.1)
        xs.append(x.item())
    np.testing.assert_allclose(xs, bowl_oracle(1.0, 0.1, 100), rtol=0, atol=1e-14)
    # Adam oscillates around the minimum, so |x| shrinks in envelope, not per step
    envelope = [max(abs(v) for v in xs[i:i + 20]) for i in range(0, 100, 20)]
    assert all(b < a for a, b in zip(envelope, envelope[1:]))
    assert abs(xs[-1]) < 0.01


def test_adam_matches_scalar_oracle():
    grads = [0.3, -1.2, 5.0, 0.0, 2.2]
    x = torch.zeros(1, dtype=torch.float64)
    state = AdamState.zeros_like([x])
    for g in grads:
        adam_step([x], [torch.tensor([g], dtype=torch.float64)], state, 0.01)
    assert x.item() == pytest.approx(scalar_adam_oracle(grads, 0.01), abs=1e-15)


@pytest.mark.parametrize("scale", [1e-4, 1.0, 1e4])
def test_adam_first_step_is_lr(scale):
    x = torch.zeros(3, dtype=torch.float64)
    state = AdamState.zeros_like([x])
    adam_step([x], [torch.tensor([scale, -scale, 2 * scale], dtype=torch.float64)], state, 0.05)
    assert torch.allclose(x.abs(), torch.full_like(x, 0.05), rtol=1e-3)


def test_adam_zero_gradient():
    x = torch.tensor([1.0, -2.0], dtype=torch.float64)
    state = AdamState.zeros_like([x])
    adam_step([x], [torch.tensor([1.0, 1.0], dtype=torch.float64)], state, 0.1)
    before, m_before, v_before = x.clone(), state.m[0].clone(), state.v[0].clone()
    adam_step([x], [torch.zeros(2, dtype=torch.float64)], state, 0.1)
    # moments decay; with a nonzero first moment the parameter still moves
    assert torch.allclose(state.m[0], 0.9 * m_before)
    assert torch.allclose(state.v[0], 0.999 * v_before)
    y = torch.tensor([3.0], dtype=torch.float64)
    fresh = AdamState.zeros_like([y])
    adam_step([y], [torch.zeros(1, dtype=torch.float64)], fresh, 0.1)
    assert y.item() == 3.0
    assert not torch.equal(before, x)


# -- schedule and config ------------------------------------------------------

def test_lr_and_crop_schedule():
    cfg = TrainConfig(steps=2000)
    assert cfg.decay_step == 1700
    assert cfg.lr_at(1699) == 1e-4 and cfg.lr_at(1700) == 1e-5
    assert cfg.crop_at(1899) == 64 and cfg.crop_at(1900) == 96


def test_config_validation_and_files(tmp_path):
    with pytest.raises(UsageError):
        TrainConfig(frames_per_clip=1)
    with pytest.raises(UsageError):
        TrainConfig(beta=-1)
    (tmp_path / "c.json").write_text('{"beta": 0.02, "steps": 10}')
    (tmp_path / "c.toml").write_text("beta = 0.04\nsteps = 20\nbatch = 2\n")
    assert TrainConfig.from_file(tmp_path / "c.json").beta == 0.02
    t = TrainConfig.from_file(tmp_path / "c.toml")
    assert (t.beta, t.steps, t.batch, t.decay_step) == (0.04, 20, 2, 17)
    (tmp_path / "bad.json").write_text('{"momentum": 0.5}')
    with pytest.raises(UsageError):
        TrainConfig.from_file(tmp_path / "bad.json")


def test_sample_batch_deterministic():
    src = SyntheticSource(size=32, seed=0)
    cfg = tiny_cfg()
    a, b = sample_batch(src, cfg, 3), sample_batch(src, cfg, 3)
    assert a.shape == (2, 2, 3, 16, 16)
    assert torch.equal(a, b)
    assert not torch.equal(a, sample_batch(src, cfg, 4))


# -- loss ---------------------------------------------------------------------

class PerfectStub:
    """Returns the input as the reconstruction and spends no bits."""

    def __call__(self, clip, quant):
        z = torch.zeros(1)
        return [FrameResult(clip[:, t], LatentBundle(z, z, z, z)) for t in range(clip.shape[1])]


def test_perfect_stub_has_zero_loss(gen):
    clip = torch.rand(2, 3, 3, 8, 8, dtype=torch.float64)
    terms = rd_loss(clip, PerfectStub(), 0.5, gen)
    assert float(terms.loss) == 0.0


def test_beta_zero_is_pure_mse():
    model = tiny_model()
    clip = sample_batch(SyntheticSource(size=32), tiny_cfg(), 0)
    with torch.no_grad():
        terms = rd_loss(clip, model, 0.0, torch.Generator().manual_seed(0))
    assert float(terms.loss) == float(terms.distortion)
    assert float(terms.rate) > 0 and float(terms.distortion) >= 0


def test_loss_components_nonnegative_and_weighted():
    model = tiny_model()
    clip = sample_batch(SyntheticSource(size=32), tiny_cfg(), 0)
    with torch.no_grad():
        t = rd_loss(clip, model, 0.1, torch.Generator().manual_seed(0))
    assert float(t.loss) == pytest.approx(float(t.distortion) + 0.1 * float(t.rate))


def test_rd_loss_gradient_matches_finite_differences():
    model = tiny_model(seed=2)
    clip = sample_batch(SyntheticSource(size=32, seed=1), tiny_cfg(batch=1), 0)
    params = list(model.parameters())

    def f():
        return rd_loss(clip, model, 0.01, torch.Generator().manual_seed(5)).loss

    grads = torch.autograd.grad(f(), params)
    g = torch.Generator().manual_seed(0)
    for p, gp in zip(params, grads):
        idx = torch.randperm(p.numel(), generator=g)[:2].tolist()
        fd = fd_grad(f, p, step=1e-6, indices=idx).reshape(-1)[idx]
        assert max_rel_err(gp.reshape(-1)[idx], fd, floor=1e-6) < 1e-3


# -- loop ---------------------------------------------------------------------

def test_train_writes_curve_and_checkpoint(tmp_path):
    model = tiny_model()
    cfg = tiny_cfg(steps=6, decay_step=4)
    res = train(model, SyntheticSource(size=32), cfg, tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "loss.csv")))
    assert [r["step"] for r in rows] == [str(i) for i in range(6)]
    assert list(rows[0]) == ["step", "loss", "D", "R", "lr"]
    assert [float(r["lr"]) for r in rows] == [1e-3] * 4 + [1e-4] * 2
    loaded, meta = VideoModel.load(res.checkpoint)
    assert meta["beta"] == cfg.beta and meta["step"] == 6
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)


def test_train_is_bitwise_reproducible():
    runs = []
    for _ in range(2):
        model = tiny_model(seed=1)
        res = train(model, SyntheticSource(size=32, seed=4), tiny_cfg(steps=4))
        runs.append(([r["loss"] for r in res.curve], [p.clone() for p in model.parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_nan_loss_aborts_with_dump(tmp_path):
    model = tiny_model()
    with torch.no_grad():
        model.iframe.synthesis.last.bias.fill_(float("nan"))
    with pytest.raises(NumericError):
        train(model, SyntheticSource(size=32), tiny_cfg(steps=2), tmp_path)
    dumps = list(tmp_path.glob("failed_batch_*.npz"))
    assert len(dumps) == 1
    assert np.load(dumps[0])["batch"].shape == (2, 2, 3, 16, 16)


def test_short_training_reduces_loss():
    model = tiny_model(seed=0)
    src = SyntheticSource(size=32, seed=0)
    eval_batch = sample_batch(src, tiny_cfg(batch=4, seed=99), 0)
    before = float(evaluate_loss(model, eval_batch, 0.01).loss)
    train(model, src, tiny_cfg(steps=30, lr_initial=3e-3, lr_decayed=1e-3, final_crop=16))
    after = float(evaluate_loss(model, eval_batch, 0.01).loss)
    assert after < before
