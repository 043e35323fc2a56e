"""Temporal autoregressive transforms for P-frames, plus the I-frame model.

Every P-frame variant reconstructs a frame as

    x_hat = mu(prev, w) + sigma(prev, w) * g_v(v, w)

and differs only in which of these pieces are learned:

    TAT       no w; mu, sigma are CNNs of the previous reconstruction
    SSF       mu is a scale-space warp driven by g_w(w); sigma == 1
    STAT      mu, sigma are CNNs of (prev, g_w(w)); g_v sees w
    STAT_SSF  mu is the scale-space warp, sigma a CNN of (prev, g_w(w)); g_v sees w
"""
from __future__ import annotations

import enum
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable

import torch
from torch import Tensor, nn

from . import nets
from . import tensor as T
from .entropy import (DiscretizedGaussian, FactorizedPrior, HyperDecoder,
                      StructuredHyperDecoder, quantize_eval)
from .errors import DimensionError, DomainError, UsageError
from .scale_space import (DEFAULT_DEPTH, DEFAULT_SIGMA0, build_scale_space_volume,
                          flow_from_raw, scale_space_warp)

SIGMA_MIN = 1e-3
Quantizer = Callable[[Tensor], Tensor]


class Variant(enum.IntEnum):
    TAT = 0
    SSF = 1
    STAT = 2
    STAT_SSF = 3

    @classmethod
    def parse(cls, name: str | int | "Variant") -> "Variant":
        if isinstance(name, cls):
            return name
        if isinstance(name, int):
            return cls(name)
        key = name.strip().upper().replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise UsageError(f"unknown variant {name!r}; choose from "
                             f"{', '.join(v.name for v in cls)}") from None

    @property
    def has_w(self) -> bool:
        return self is not Variant.TAT

    @property
    def warps(self) -> bool:
        return self in (Variant.SSF, Variant.STAT_SSF)

    @property
    def gated(self) -> bool:
        return self is not Variant.SSF

    @property
    def w_conditions_residual(self) -> bool:
        return self in (Variant.STAT, Variant.STAT_SSF)


@dataclass
class VariantConfig:
    variant: Variant = Variant.STAT_SSF
    structured_prior: bool = False
    channels: int = 64
    latent_channels: int = 32
    hyper_channels: int = 16
    gate_channels: int = 32
    blocks: int = 4
    sigma0: float = DEFAULT_SIGMA0
    depth: int = DEFAULT_DEPTH

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if self.structured_prior and not self.variant.has_w:
            raise UsageError("the structured prior needs a w latent; TAT has none")
        if self.sigma0 <= 0 or self.depth < 1:
            raise DomainError("sigma0 must be positive and depth >= 1")

    @property
    def granularity(self) -> int:
        """Frame extents must be multiples of this."""
        return max(2 ** self.blocks, 2 ** (self.depth - 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VariantConfig":
        return cls(**d)

    def config_hash(self) -> int:
        return zlib.crc32(json.dumps(self.to_dict(), sort_keys=True).encode())


# -- masked autoregressive flow step ------------------------------------------

@dataclass
class ScaleShift:
    mu: Tensor
    sigma: Tensor


def maf_forward(y: Tensor, ss: ScaleShift) -> Tensor:
    """x = mu + sigma * y."""
    if (ss.sigma.detach() <= 0).any():
        raise DomainError("scale must be strictly positive")
    return T.elementwise("add", ss.mu, T.elementwise("mul", ss.sigma, y))


def maf_inverse(x: Tensor, ss: ScaleShift) -> Tensor:
    """y = (x - mu) / sigma."""
    if (ss.sigma.detach() <= 0).any():
        raise DomainError("scale must be strictly positive")
    return T.elementwise("div", T.elementwise("sub", x, ss.mu), ss.sigma)


def positive_scale(raw: Tensor) -> Tensor:
    return T.elementwise("softplus", raw) + SIGMA_MIN


def _inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))


# -- latent bookkeeping -------------------------------------------------------

@dataclass
class LatentBundle:
    v_mean: Tensor
    v_hyper_mean: Tensor
    v_hat: Tensor
    v_hyper_hat: Tensor
    w_mean: Tensor | None = None
    w_hyper_mean: Tensor | None = None
    w_hat: Tensor | None = None
    w_hyper_hat: Tensor | None = None


@dataclass
class FrameResult:
    recon: Tensor
    latents: LatentBundle
    priors: dict = field(default_factory=dict)
    scale_shift: ScaleShift | None = None

    def bits(self) -> dict[str, Tensor]:
        """Per-tensor code length in bits under the priors, summed over the batch."""
        out = {}
        for name, (prior, value) in self.priors.items():
            out[name] = prior.bits(value).sum()
        return out

    def total_bits(self) -> Tensor:
        return sum(self.bits().values())


# -- I-frame model ------------------------------------------------------------

class IFrameModel(nn.Module):
    """Hyper-prior image autoencoder for the first frame of a stream."""

    def __init__(self, cfg: VariantConfig):
        super().__init__()
        c, lc, hc = cfg.channels, cfg.latent_channels, cfg.hyper_channels
        self.analysis = nets.encoder(3, c, lc, cfg.blocks)
        self.synthesis = nets.decoder(lc, c, 3, cfg.blocks)
        self.hyper_analysis = nets.hyper_encoder(lc, hc)
        self.hyper_synthesis = HyperDecoder(hc, lc, c)
        self.hyper_prior = FactorizedPrior(hc)

    def init_(self, gen: torch.Generator) -> None:
        self.analysis.init_(gen)
        self.synthesis.init_(gen)
        with torch.no_grad():
            self.synthesis.last.bias.fill_(0.5)
        self.hyper_analysis.init_(gen)
        self.hyper_synthesis.init_(gen)
        self.hyper_prior.init_(gen)

    def decode(self, y_hat: Tensor) -> Tensor:
        return self.synthesis(y_hat).clamp(0.0, 1.0)

    def forward(self, x: Tensor, quant: Quantizer = quantize_eval) -> FrameResult:
        y_mean = self.analysis(x)
        h_mean = self.hyper_analysis(y_mean)
        y_hat, h_hat = quant(y_mean), quant(h_mean)
        params = self.hyper_synthesis(h_hat, y_hat.shape[-2:])
        bundle = LatentBundle(y_mean, h_mean, y_hat, h_hat)
        priors = {"v_hyper": (self.hyper_prior, h_hat), "v": (params, y_hat)}
        return FrameResult(self.decode(y_hat), bundle, priors)


# -- P-frame model ------------------------------------------------------------

class PFrameModel(nn.Module):
    """One of the four temporal transforms, with hyper-priors for w and v."""

    def __init__(self, cfg: VariantConfig):
        super().__init__()
        self.cfg = cfg
        v = cfg.variant
        c, lc, hc, gc = cfg.channels, cfg.latent_channels, cfg.hyper_channels, cfg.gate_channels
        ctx_ch = 3 + (3 if v.has_w else 0)
        if v.has_w:
            self.f_w = nets.encoder(6, c, lc, cfg.blocks)
            self.g_w = nets.decoder(lc, c, 3, cfg.blocks)
            self.w_hyper_analysis = nets.hyper_encoder(lc, hc)
            self.w_hyper_synthesis = HyperDecoder(hc, lc, c)
            self.w_hyper_prior = FactorizedPrior(hc)
        if not v.warps:
            self.shift_net = nets.small_cnn(ctx_ch, gc, 3)
        if v.gated:
            self.scale_net = nets.small_cnn(ctx_ch, gc, 3)
        self.f_v = nets.encoder(3, c, lc, cfg.blocks)
        self.g_v = nets.decoder(lc * (2 if v.w_conditions_residual else 1), c, 3, cfg.blocks)
        self.v_hyper_analysis = nets.hyper_encoder(lc, hc)
        self.v_hyper_synthesis = StructuredHyperDecoder(hc, lc, lc if v.has_w else 0, c,
                                                        cfg.structured_prior)
        self.v_hyper_prior = FactorizedPrior(hc)

    @property
    def variant(self) -> Variant:
        return self.cfg.variant

    def init_(self, gen: torch.Generator) -> None:
        v = self.variant
        if v.has_w:
            self.f_w.init_(gen)
            self.g_w.init_(gen, last_gain=0.1)
            with torch.no_grad():
                # start with a light blur rather than the middle of the pyramid
                self.g_w.last.bias[2] = -4.0
            self.w_hyper_analysis.init_(gen)
            self.w_hyper_synthesis.init_(gen)
            self.w_hyper_prior.init_(gen)
        if not v.warps:
            self.shift_net.init_(gen)
            with torch.no_grad():
                self.shift_net.last.weight.zero_()
        if v.gated:
            self.scale_net.init_(gen)
            with torch.no_grad():
                self.scale_net.last.weight.zero_()
                self.scale_net.last.bias.fill_(_inv_softplus(1.0 - SIGMA_MIN))
        self.f_v.init_(gen)
        self.g_v.init_(gen, last_gain=0.1)
        self.v_hyper_analysis.init_(gen)
        self.v_hyper_synthesis.init_(gen)
        self.v_hyper_prior.init_(gen)

    # decoder-side pieces; these see only quantised latents and prev

    def motion_field(self, w_hat: Tensor | None) -> Tensor | None:
        return self.g_w(w_hat) if self.variant.has_w else None

    def scale_shift(self, prev: Tensor, field: Tensor | None) -> ScaleShift:
        v = self.variant
        ctx = prev if field is None else torch.cat([prev, field], dim=1)
        if v.warps:
            volume = build_scale_space_volume(prev, self.cfg.sigma0, self.cfg.depth)
            mu = scale_space_warp(volume, flow_from_raw(field, self.cfg.depth))
        else:
            mu = T.elementwise("add", prev, self.shift_net(ctx))
        sigma = positive_scale(self.scale_net(ctx)) if v.gated else torch.ones_like(mu)
        return ScaleShift(mu, sigma)

    def residual(self, v_hat: Tensor, w_hat: Tensor | None) -> Tensor:
        if self.variant.w_conditions_residual:
            return self.g_v(torch.cat([v_hat, w_hat], dim=1))
        return self.g_v(v_hat)

    def reconstruct(self, prev: Tensor, w_hat: Tensor | None, v_hat: Tensor) -> Tensor:
        ss = self.scale_shift(prev, self.motion_field(w_hat))
        return maf_forward(self.residual(v_hat, w_hat), ss).clamp(0.0, 1.0)

    def v_prior(self, v_hyper_hat: Tensor, w_hyper_hat: Tensor | None, w_hat: Tensor | None,
                latent_hw: tuple[int, int]) -> DiscretizedGaussian:
        return self.v_hyper_synthesis(v_hyper_hat, w_hyper_hat, w_hat, latent_hw)

    # encoder side

    def forward(self, x: Tensor, prev: Tensor, quant: Quantizer = quantize_eval) -> FrameResult:
        if x.shape != prev.shape:
            raise DimensionError(f"frame {tuple(x.shape)} vs previous {tuple(prev.shape)}")
        priors = {}
        w_mean = w_hyper_mean = w_hat = w_hyper_hat = None
        if self.variant.has_w:
            w_mean = self.f_w(torch.cat([x, prev], dim=1))
            w_hyper_mean = self.w_hyper_analysis(w_mean)
            w_hat, w_hyper_hat = quant(w_mean), quant(w_hyper_mean)
            priors["w_hyper"] = (self.w_hyper_prior, w_hyper_hat)
            priors["w"] = (self.w_hyper_synthesis(w_hyper_hat, w_hat.shape[-2:]), w_hat)
        ss = self.scale_shift(prev, self.motion_field(w_hat))
        v_mean = self.f_v(maf_inverse(x, ss))
        v_hyper_mean = self.v_hyper_analysis(v_mean)
        v_hat, v_hyper_hat = quant(v_mean), quant(v_hyper_mean)
        priors["v_hyper"] = (self.v_hyper_prior, v_hyper_hat)
        priors["v"] = (self.v_prior(v_hyper_hat, w_hyper_hat, w_hat, v_hat.shape[-2:]), v_hat)
        recon = maf_forward(self.residual(v_hat, w_hat), ss).clamp(0.0, 1.0)
        bundle = LatentBundle(v_mean, v_hyper_mean, v_hat, v_hyper_hat,
                              w_mean, w_hyper_mean, w_hat, w_hyper_hat)
        return FrameResult(recon, bundle, priors, ss)

    def encode_latents(self, x: Tensor, prev: Tensor, quant: Quantizer = quantize_eval) -> LatentBundle:
        return self.forward(x, prev, quant).latents

    # named specialisations

    def tat_encode(self, x: Tensor, prev: Tensor) -> Tensor:
        """Whiten ``x`` against the prediction from ``prev`` and analyse it."""
        self._require(Variant.TAT)
        return self.f_v(maf_inverse(x, self.scale_shift(prev, None)))

    def tat_decode(self, z_hat: Tensor, prev: Tensor) -> Tensor:
        self._require(Variant.TAT)
        return self.reconstruct(prev, None, z_hat)

    def ssf_reconstruct(self, prev: Tensor, w_hat: Tensor, v_hat: Tensor) -> Tensor:
        self._require(Variant.SSF)
        return self.reconstruct(prev, w_hat, v_hat)

    def stat_reconstruct(self, prev: Tensor, w_hat: Tensor, v_hat: Tensor) -> Tensor:
        self._require(Variant.STAT, Variant.STAT_SSF)
        return self.reconstruct(prev, w_hat, v_hat)

    def _require(self, *variants: Variant) -> None:
        if self.variant not in variants:
            raise UsageError(f"operation needs variant {'/'.join(v.name for v in variants)}, "
                             f"model is {self.variant.name}")


# -- whole-clip model ---------------------------------------------------------

class VideoModel(nn.Module):
    """I-frame model for frame 0, P-frame model conditioned on the previous reconstruction."""

    def __init__(self, cfg: VariantConfig):
        super().__init__()
        self.cfg = cfg
        self.iframe = IFrameModel(cfg)
        self.pframe = PFrameModel(cfg)

    @classmethod
    def create(cls, cfg: VariantConfig, seed: int = 0) -> "VideoModel":
        model = cls(cfg)
        gen = torch.Generator().manual_seed(seed)
        model.iframe.init_(gen)
        model.pframe.init_(gen)
        return model

    def check_frame_shape(self, h: int, w: int) -> None:
        g = self.cfg.granularity
        if h % g or w % g:
            raise UsageError(f"frame size {h}x{w} must be a multiple of {g}")

    def forward(self, clip: Tensor, quant: Quantizer = quantize_eval) -> list[FrameResult]:
        """``clip`` is ``[N, T, 3, H, W]``; returns one result per frame."""
        if clip.dim() != 5 or clip.shape[2] != 3:
            raise DimensionError(f"expected [N, T, 3, H, W], got {tuple(clip.shape)}")
        self.check_frame_shape(*clip.shape[-2:])
        results = [self.iframe(clip[:, 0], quant)]
        for t in range(1, clip.shape[1]):
            results.append(self.pframe(clip[:, t], results[-1].recon, quant))
        return results

    def metadata(self, **extra) -> dict:
        return {"config": self.cfg.to_dict(), **extra}

    def save(self, path, **extra) -> None:
        T.save_checkpoint(path, dict(self.named_parameters()), self.metadata(**extra))

    @classmethod
    def load(cls, path) -> tuple["VideoModel", dict]:
        params, meta = T.load_checkpoint(path)
        model = cls(VariantConfig.from_dict(meta["config"]))
        own = dict(model.named_parameters())
        if set(own) != set(params):
            missing = sorted(set(own) ^ set(params))
            raise UsageError(f"checkpoint parameters do not match the model: {missing[:5]}")
        with torch.no_grad():
            for name, p in own.items():
                if p.shape != params[name].shape:
                    raise UsageError(f"shape mismatch for {name}")
                p.copy_(params[name])
        return model, meta
