"""Gaussian scale-space volumes built from a pyramid, and trilinear warping.

Volumes are stored as ``[N, M+1, C, H, W]`` tensors; level 0 is the input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import DimensionError, DomainError

DEFAULT_SIGMA0 = 1.5
DEFAULT_DEPTH = 5


@dataclass(frozen=True)
class GaussianKernel:
    sigma: float
    taps: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.taps)


@dataclass
class ScaleSpaceVolume:
    levels: Tensor  # [N, M+1, C, H, W]
    sigma0: float
    depth: int

    @property
    def composed_variances(self) -> list[float]:
        return composed_variances(self.sigma0, self.depth)

    def level(self, k: int) -> Tensor:
        return self.levels[:, k]


@dataclass
class FlowField:
    """Per-pixel displacement in pixels plus a pyramid-level coordinate."""

    dx: Tensor  # [N, H, W]
    dy: Tensor
    scale: Tensor


def kernel_length(sigma: float) -> int:
    if sigma == 0:
        return 1
    n = math.ceil(6 * sigma + 1)
    return n if n % 2 == 1 else n + 1


def create_gaussian_kernel(sigma: float) -> GaussianKernel:
    """Sampled, normalised 1-D Gaussian of length ``ceil_odd(6*sigma + 1)``."""
    if sigma < 0:
        raise DomainError(f"sigma must be non-negative, got {sigma}")
    n = kernel_length(sigma)
    if n == 1:
        return GaussianKernel(float(sigma), (1.0,))
    r = n // 2
    xs = torch.arange(-r, r + 1, dtype=torch.float64)
    taps = torch.exp(-0.5 * (xs / sigma) ** 2)
    taps = taps / taps.sum()
    # symmetric by construction; average mirrored taps to kill rounding asymmetry
    taps = 0.5 * (taps + taps.flip(0))
    return GaussianKernel(float(sigma), tuple(taps.tolist()))


def composed_variances(sigma0: float, depth: int) -> list[float]:
    """Full-resolution blur variance of each pyramid level."""
    return [sigma0 ** 2 * sum(4 ** j for j in range(k)) for k in range(depth + 1)]


def _as_nchw(img: Tensor) -> tuple[Tensor, bool]:
    if img.dim() == 3:
        return img.unsqueeze(0), True
    if img.dim() == 4:
        return img, False
    raise DimensionError(f"expected CxHxW or NxCxHxW, got {tuple(img.shape)}")


def gaussian_blur(img: Tensor, kernel: GaussianKernel) -> Tensor:
    """Separable blur with edge-replicate padding; preserves shape."""
    if len(kernel) == 1:
        return img.clone()
    x, squeezed = _as_nchw(img)
    n, c, h, w = x.shape
    r = len(kernel) // 2
    taps = torch.tensor(kernel.taps, dtype=x.dtype)
    flat = x.reshape(n * c, 1, h, w)
    flat = F.pad(flat, (r, r, 0, 0), mode="replicate")
    flat = F.conv2d(flat, taps.view(1, 1, 1, -1))
    flat = F.pad(flat, (0, 0, r, r), mode="replicate")
    flat = F.conv2d(flat, taps.view(1, 1, -1, 1))
    out = flat.reshape(n, c, h, w)
    return out[0] if squeezed else out


def downsample2x(img: Tensor) -> Tensor:
    """2x2 average pooling."""
    x, squeezed = _as_nchw(img)
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise DimensionError(f"cannot downsample spatial shape {tuple(x.shape[-2:])}")
    out = F.avg_pool2d(x, 2)
    return out[0] if squeezed else out


def upsample2x(img: Tensor) -> Tensor:
    """Bilinear upsampling by exactly two (half-pixel centres, clamped edges)."""
    x, squeezed = _as_nchw(img)
    out = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
    return out[0] if squeezed else out


def build_scale_space_volume(img: Tensor, sigma0: float = DEFAULT_SIGMA0,
                             depth: int = DEFAULT_DEPTH) -> ScaleSpaceVolume:
    """Blur with a fixed ``sigma0`` kernel, record, downsample; repeat.

    Level ``k >= 2`` is computed at ``1/2**(k-1)`` resolution and brought back
    with ``k-1`` successive 2x bilinear upsamplings.
    """
    if sigma0 <= 0:
        raise DomainError(f"sigma0 must be positive, got {sigma0}")
    if depth < 1:
        raise DomainError(f"depth must be >= 1, got {depth}")
    x, _ = _as_nchw(img)
    h, w = x.shape[-2:]
    factor = 2 ** (depth - 1)
    if h % factor or w % factor:
        raise DimensionError(f"spatial shape {h}x{w} not divisible by {factor}")
    kernel = create_gaussian_kernel(sigma0)
    levels = [x]
    cur = x
    for i in range(depth):
        cur = gaussian_blur(cur, kernel)
        tmp = cur
        for _ in range(i):
            tmp = upsample2x(tmp)
        levels.append(tmp)
        if i < depth - 1:
            cur = downsample2x(cur)
    # a CxHxW input yields a volume with batch extent 1
    return ScaleSpaceVolume(torch.stack(levels, dim=1), float(sigma0), depth)


def direct_scale_space_level(img: Tensor, sigma0: float, k: int) -> Tensor:
    """Reference level ``k``: one full-resolution blur at the composed sigma."""
    sigma = math.sqrt(composed_variances(sigma0, k)[k])
    return gaussian_blur(img, create_gaussian_kernel(sigma))


def scale_space_warp(volume: ScaleSpaceVolume, flow: FlowField) -> Tensor:
    """Sample the volume at ``(j + dx, i + dy, scale)`` for every pixel.

    Bilinear in space within the two bracketing levels, linear across them.
    Spatial coordinates clamp to the border, scale clamps to ``[0, depth]``.
    Returns ``[N, C, H, W]``.
    """
    vol = volume.levels
    n, nlev, c, h, w = vol.shape
    if flow.dx.shape != (n, h, w) or flow.dy.shape != (n, h, w) or flow.scale.shape != (n, h, w):
        raise DimensionError(
            f"flow shape {tuple(flow.dx.shape)} does not match volume {(n, h, w)}"
        )
    dtype = vol.dtype
    ii = torch.arange(h, dtype=dtype).view(1, h, 1)
    jj = torch.arange(w, dtype=dtype).view(1, 1, w)
    x = (jj + flow.dx).clamp(0, w - 1)
    y = (ii + flow.dy).clamp(0, h - 1)
    s = flow.scale.clamp(0, nlev - 1)

    def split(coord: Tensor, size: int) -> tuple[Tensor, Tensor]:
        if size == 1:
            base = torch.zeros_like(coord, dtype=torch.long)
            return base, coord - coord.detach()
        base = coord.detach().floor().clamp(0, size - 2).long()
        return base, coord - base.to(dtype)

    x0, fx = split(x, w)
    y0, fy = split(y, h)
    s0, fs = split(s, nlev)
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    s1 = (s0 + 1).clamp(max=nlev - 1)

    flat = vol.permute(0, 2, 1, 3, 4).reshape(n, c, nlev * h * w)

    def gather(sl: Tensor, yl: Tensor, xl: Tensor) -> Tensor:
        idx = (sl * (h * w) + yl * w + xl).reshape(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).reshape(n, c, h, w)

    fx = fx.unsqueeze(1)
    fy = fy.unsqueeze(1)
    fs = fs.unsqueeze(1)

    def bilinear(sl: Tensor) -> Tensor:
        top = gather(sl, y0, x0) * (1 - fx) + gather(sl, y0, x1) * fx
        bot = gather(sl, y1, x0) * (1 - fx) + gather(sl, y1, x1) * fx
        return top * (1 - fy) + bot * fy

    return bilinear(s0) * (1 - fs) + bilinear(s1) * fs


def flow_from_raw(raw: Tensor, depth: int) -> FlowField:
    """Map a 3-channel network output to a flow field; scale = depth * sigmoid."""
    return FlowField(raw[:, 0], raw[:, 1], depth * torch.sigmoid(raw[:, 2]))
