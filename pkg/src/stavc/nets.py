"""Convolutional building blocks shared by the transforms and entropy models."""
from __future__ import annotations

import torch
from torch import Tensor, nn

from . import tensor as T


class Conv(nn.Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(cout, cin, k, k, dtype=T.DTYPE))
        self.bias = nn.Parameter(torch.zeros(cout, dtype=T.DTYPE))
        self.stride = stride
        self.padding = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvT(nn.Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 2):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(cin, cout, k, k, dtype=T.DTYPE))
        self.bias = nn.Parameter(torch.zeros(cout, dtype=T.DTYPE))
        self.stride = stride
        self.padding = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d_transpose(x, self.weight, self.bias, self.stride, self.padding)


def init_uniform_(layer: Conv | ConvT, gen: torch.Generator, gain: float = 1.0) -> None:
    w = layer.weight
    if isinstance(layer, ConvT):
        fan_in = w.shape[0] * w.shape[2] * w.shape[3] / layer.stride ** 2
    else:
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
    bound = gain * (3.0 / fan_in) ** 0.5
    with torch.no_grad():
        w.copy_((torch.rand(w.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
        layer.bias.zero_()


class Stack(nn.Module):
    """Layers separated by leaky ReLU, none after the last."""

    def __init__(self, layers: list[nn.Module]):
        super().__init__()
        self.layers = nn.ModuleList(layers)

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.elementwise("leaky_relu", x)
        return x

    def init_(self, gen: torch.Generator, last_gain: float = 1.0) -> None:
        for i, layer in enumerate(self.layers):
            init_uniform_(layer, gen, last_gain if i == len(self.layers) - 1 else 1.0)

    @property
    def last(self) -> Conv | ConvT:
        return self.layers[-1]


def encoder(cin: int, mid: int, cout: int, blocks: int = 4) -> Stack:
    """``blocks`` stride-2 5x5 convolutions."""
    chans = [cin] + [mid] * (blocks - 1) + [cout]
    return Stack([Conv(chans[i], chans[i + 1], 5, 2) for i in range(blocks)])


def decoder(cin: int, mid: int, cout: int, blocks: int = 4) -> Stack:
    """``blocks`` stride-2 5x5 transposed convolutions."""
    chans = [cin] + [mid] * (blocks - 1) + [cout]
    return Stack([ConvT(chans[i], chans[i + 1], 5, 2) for i in range(blocks)])


def small_cnn(cin: int, mid: int, cout: int, blocks: int = 3) -> Stack:
    """Full-resolution 3x3 convolutions."""
    chans = [cin] + [mid] * (blocks - 1) + [cout]
    return Stack([Conv(chans[i], chans[i + 1], 3, 1) for i in range(blocks)])


def hyper_encoder(cin: int, cout: int) -> Stack:
    return Stack([Conv(cin, cout, 3, 1), Conv(cout, cout, 5, 2)])


def crop_to(x: Tensor, like: Tensor | tuple[int, int]) -> Tensor:
    h, w = like.shape[-2:] if isinstance(like, Tensor) else like
    return x[..., :h, :w]
