"""Quantisation proxies, latent priors, and pmf -> frequency-table conversion."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import nets
from . import tensor as T
from .errors import CodingError, DimensionError, DomainError

SCALE_FLOOR = 0.04
PMF_FLOOR = 2.0 ** -16
PRECISION = 16
MAX_SUPPORT = 1 << 15


# -- quantisation -------------------------------------------------------------

def quantize_train(z: Tensor, gen: torch.Generator) -> Tensor:
    """Additive U(-0.5, 0.5) noise; the noise is a constant w.r.t. ``z``."""
    u = torch.rand(z.shape, generator=gen, dtype=z.dtype) - 0.5
    return z + u


def quantize_eval(z: Tensor) -> Tensor:
    """Round half away from zero."""
    return torch.sign(z) * torch.floor(z.abs() + 0.5) + 0.0


class _LowerBound(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: Tensor, bound: float) -> Tensor:
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad: Tensor):
        (x,) = ctx.saved_tensors
        # let gradients through where they would push x back above the bound
        passthrough = (x >= ctx.bound) | (grad < 0)
        return grad * passthrough, None


def lower_bound(x: Tensor, bound: float) -> Tensor:
    return _LowerBound.apply(x, bound)


def bits_from_pmf(p: Tensor) -> Tensor:
    return -torch.log2(lower_bound(p, PMF_FLOOR))


# -- discretised Gaussian -----------------------------------------------------

class DiscretizedGaussian:
    """Gaussian integrated over unit-width bins centred on the integers."""

    def __init__(self, mean: Tensor, scale: Tensor):
        if mean.shape != scale.shape:
            raise DimensionError(f"mean {tuple(mean.shape)} vs scale {tuple(scale.shape)}")
        if (scale.detach() <= 0).any():
            raise DomainError("Gaussian scale must be positive")
        self.mean = mean
        self.scale = scale

    def pmf(self, k: Tensor) -> Tensor:
        # evaluate on the lower tail for accuracy
        v = (k - self.mean).abs()
        upper = torch.special.ndtr((0.5 - v) / self.scale)
        lower = torch.special.ndtr((-0.5 - v) / self.scale)
        return upper - lower

    def bits(self, k: Tensor) -> Tensor:
        return bits_from_pmf(self.pmf(k))

    def pmf_table(self, lower: int, upper: int) -> Tensor:
        """``[numel, upper-lower+1]`` pmf with tail mass folded into the edge symbols."""
        m = self.mean.detach().reshape(-1, 1)
        s = self.scale.detach().reshape(-1, 1)
        ks = torch.arange(lower, upper + 1, dtype=m.dtype).view(1, -1)
        v = (ks - m).abs()
        p = torch.special.ndtr((0.5 - v) / s) - torch.special.ndtr((-0.5 - v) / s)
        p[:, 0] = torch.special.ndtr((lower + 0.5 - m[:, 0]) / s[:, 0])
        p[:, -1] = torch.special.ndtr(-(upper - 0.5 - m[:, 0]) / s[:, 0])
        return p


def gaussian_params(raw: Tensor) -> DiscretizedGaussian:
    """Split ``[N, 2C, H, W]`` into mean and floored softplus scale."""
    mean, s = raw.chunk(2, dim=1)
    return DiscretizedGaussian(mean, F.softplus(s) + SCALE_FLOOR)


# -- factorised prior ---------------------------------------------------------

class FactorizedPrior(nn.Module):
    """Per-channel learned monotone cumulative (non-parametric density).

    The cumulative is ``sigmoid(f(x))`` with ``f`` a chain of small per-channel
    affine maps whose matrices are kept positive and whose nonlinearities are
    monotone, so the cdf increases strictly from 0 to 1.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3),
                 init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(filters) + 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init,
                                                         dtype=T.DTYPE)))
            self.biases.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1, dtype=T.DTYPE)))
            if i < len(filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1,
                                                             dtype=T.DTYPE)))

    def init_(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            for b in self.biases:
                b.copy_(torch.rand(b.shape, generator=gen, dtype=b.dtype) - 0.5)

    def logits_cdf(self, x: Tensor) -> Tensor:
        """``x`` is ``[C, L]``; returns ``[C, L]`` cdf logits."""
        h = x.unsqueeze(1)
        for i, m in enumerate(self.matrices):
            h = torch.matmul(F.softplus(m), h) + self.biases[i]
            if i < len(self.factors):
                h = h + torch.tanh(self.factors[i]) * torch.tanh(h)
        return h.squeeze(1)

    def _channels_first(self, k: Tensor) -> tuple[Tensor, tuple[int, ...]]:
        if k.dim() < 2 or k.shape[1] != self.channels:
            raise DimensionError(f"expected [N, {self.channels}, ...], got {tuple(k.shape)}")
        perm = k.transpose(0, 1)
        return perm.reshape(self.channels, -1), perm.shape

    def pmf(self, k: Tensor) -> Tensor:
        flat, shape = self._channels_first(k)
        lo = self.logits_cdf(flat - 0.5)
        hi = self.logits_cdf(flat + 0.5)
        sign = -torch.sign(lo + hi).detach()
        p = (torch.sigmoid(sign * hi) - torch.sigmoid(sign * lo)).abs()
        return p.reshape(shape).transpose(0, 1)

    def bits(self, k: Tensor) -> Tensor:
        return bits_from_pmf(self.pmf(k))

    def cdf(self, x: Tensor) -> Tensor:
        return torch.sigmoid(self.logits_cdf(x))

    @torch.no_grad()
    def pmf_table(self, lower: int, upper: int) -> Tensor:
        """``[C, upper-lower+1]`` pmf with tail mass folded into the edge symbols."""
        ks = torch.arange(lower, upper + 1, dtype=T.DTYPE).expand(self.channels, -1)
        lo = self.logits_cdf(ks - 0.5)
        hi = self.logits_cdf(ks + 0.5)
        sign = -torch.sign(lo + hi)
        p = (torch.sigmoid(sign * hi) - torch.sigmoid(sign * lo)).abs()
        p[:, 0] = torch.sigmoid(hi[:, 0])
        p[:, -1] = torch.sigmoid(-lo[:, -1])
        return p

    @torch.no_grad()
    def tail_bounds(self, mass: float = 1e-9) -> tuple[Tensor, Tensor]:
        """Per-channel points where the cdf equals ``mass`` and ``1 - mass``."""
        target = math.log(mass / (1 - mass))

        def solve(t: float) -> Tensor:
            lo = torch.full((self.channels, 1), -1.0, dtype=T.DTYPE)
            hi = torch.full((self.channels, 1), 1.0, dtype=T.DTYPE)
            while (self.logits_cdf(lo) > t).any():
                lo = torch.where(self.logits_cdf(lo) > t, lo * 2, lo)
            while (self.logits_cdf(hi) < t).any():
                hi = torch.where(self.logits_cdf(hi) < t, hi * 2, hi)
            for _ in range(100):
                mid = 0.5 * (lo + hi)
                below = self.logits_cdf(mid) < t
                lo = torch.where(below, mid, lo)
                hi = torch.where(below, hi, mid)
            return 0.5 * (lo + hi).squeeze(1)

        return solve(target), solve(-target)


# -- hyper decoders -----------------------------------------------------------

class HyperDecoder(nn.Module):
    """Hyper-latent -> (mean, scale) of the latent it describes."""

    def __init__(self, hyper_ch: int, latent_ch: int, mid: int):
        super().__init__()
        self.up = nets.ConvT(hyper_ch, mid, 5, 2)
        self.head = nets.Stack([nets.Conv(mid, mid, 3), nets.Conv(mid, 2 * latent_ch, 3)])

    def init_(self, gen: torch.Generator) -> None:
        nets.init_uniform_(self.up, gen)
        self.head.init_(gen, last_gain=0.1)

    def forward(self, hyper_hat: Tensor, latent_hw: tuple[int, int]) -> DiscretizedGaussian:
        h = nets.crop_to(T.elementwise("leaky_relu", self.up(hyper_hat)), latent_hw)
        return gaussian_params(self.head(h))


class StructuredHyperDecoder(nn.Module):
    """Parameters of ``p(v | v_hyper, w_hyper, w)``.

    With ``structured=False`` the w inputs are replaced by zeros, which turns
    this into a plain hyper-decoder of ``v_hyper`` alone.
    """

    def __init__(self, hyper_ch: int, latent_ch: int, w_ch: int, mid: int, structured: bool):
        super().__init__()
        self.structured = structured
        self.hyper_ch = hyper_ch
        self.w_ch = w_ch
        self.up = nets.ConvT(2 * hyper_ch, mid, 5, 2)
        self.head = nets.Stack([nets.Conv(mid + w_ch, mid, 3), nets.Conv(mid, 2 * latent_ch, 3)])

    def init_(self, gen: torch.Generator) -> None:
        nets.init_uniform_(self.up, gen)
        self.head.init_(gen, last_gain=0.1)

    def forward(self, v_hyper_hat: Tensor, w_hyper_hat: Tensor | None, w_hat: Tensor | None,
                latent_hw: tuple[int, int]) -> DiscretizedGaussian:
        n, _, hh, hw = v_hyper_hat.shape
        if self.structured:
            if w_hyper_hat is None or w_hat is None:
                raise DimensionError("structured prior needs w and its hyper-latent")
        else:
            w_hyper_hat = v_hyper_hat.new_zeros(n, self.hyper_ch, hh, hw)
            w_hat = v_hyper_hat.new_zeros(n, self.w_ch, *latent_hw)
        h = self.up(torch.cat([v_hyper_hat, w_hyper_hat], dim=1))
        h = nets.crop_to(T.elementwise("leaky_relu", h), latent_hw)
        return gaussian_params(self.head(torch.cat([h, w_hat], dim=1)))


def structured_prior_params(decoder: StructuredHyperDecoder, v_hyper_hat: Tensor,
                            w_hyper_hat: Tensor | None, w_hat: Tensor | None,
                            latent_hw: tuple[int, int]) -> DiscretizedGaussian:
    return decoder(v_hyper_hat, w_hyper_hat, w_hat, latent_hw)


# -- frequency tables ---------------------------------------------------------

def pmf_to_freqs(pmf: np.ndarray | Tensor, precision: int = PRECISION) -> np.ndarray:
    """Quantise rows of a pmf to integer frequencies summing to ``2**precision``.

    Every symbol keeps frequency >= 1; the leftover after flooring is handed
    out by largest remainder, ties broken by symbol index.
    """
    p = pmf.detach().cpu().numpy() if isinstance(pmf, Tensor) else np.asarray(pmf)
    p = np.atleast_2d(np.clip(p.astype(np.float64), 0.0, None))
    rows, size = p.shape
    total = 1 << precision
    if size > total // 2:
        raise CodingError(f"support of {size} symbols exceeds the coder limit {total // 2}")
    sums = p.sum(axis=1, keepdims=True)
    if (sums <= 0).any():
        raise CodingError("pmf row with zero total mass")
    scaled = p / sums * (total - size)
    base = np.floor(scaled)
    freqs = base.astype(np.int64) + 1
    remaining = total - freqs.sum(axis=1)
    order = np.argsort(-(scaled - base), axis=1, kind="stable")
    ranks = np.empty_like(order)
    ranks[np.arange(rows)[:, None], order] = np.arange(size)[None, :]
    freqs += ranks < remaining[:, None]
    return freqs


def support_of(values: Tensor) -> tuple[int, int]:
    """Dynamic coder support ``[min - 1, max + 1]`` of an integer tensor."""
    if values.numel() == 0:
        return 0, 0
    lo = int(values.min().item()) - 1
    hi = int(values.max().item()) + 1
    if hi - lo + 1 > MAX_SUPPORT:
        flat = values.reshape(-1)
        idx = int(flat.abs().argmax().item())
        loc = tuple(int(i) for i in np.unravel_index(idx, tuple(values.shape)))
        raise CodingError(
            f"latent value {flat[idx].item():.0f} at index {loc} gives support "
            f"[{lo}, {hi}] wider than {MAX_SUPPORT} symbols"
        )
    return lo, hi
