"""Dense tensor ops with reverse-mode gradients.

The heavy lifting (storage, tape, kernels) is delegated to torch; this module
pins down the handful of ops the models use, their shape rules, finiteness
checks, and the checkpoint file format.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import CorruptStreamError, DimensionError, NumericError, UsageError

DTYPE = torch.float64
LEAKY_SLOPE = 0.2
DIV_EPS = 1e-12

CKPT_MAGIC = b"STAVCKPT"
CKPT_VERSION = 1

_DTYPE_CODES = {torch.float64: 0, torch.float32: 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

check_finite_enabled = True


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if check_finite_enabled and not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


def _check_conv_args(input: Tensor, weight: Tensor, stride: int, in_ch: int) -> None:
    if input.dim() != 4 or weight.dim() != 4:
        raise DimensionError(
            f"conv expects 4-d input and weight, got {tuple(input.shape)} and {tuple(weight.shape)}"
        )
    kh, kw = weight.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"kernel extents must be odd, got {kh}x{kw}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if input.shape[1] != in_ch:
        raise DimensionError(f"input has {input.shape[1]} channels, weight expects {in_ch}")


def conv2d(input: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW layout, weight laid out [K, C, kh, kw]."""
    _check_conv_args(input, weight, stride, weight.shape[1])
    out = F.conv2d(input, weight, bias, stride=stride, padding=padding)
    return check_finite(out, "conv2d output")


def conv2d_transpose(input: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int | None = None) -> Tensor:
    """Transposed convolution; weight laid out [C_in, K, kh, kw].

    ``output_padding`` defaults to ``stride - 1`` so that a stride-s transpose
    exactly undoes the spatial shrink of a stride-s conv with the same padding.
    """
    _check_conv_args(input, weight, stride, weight.shape[0])
    if output_padding is None:
        output_padding = stride - 1
    out = F.conv_transpose2d(input, weight, bias, stride=stride, padding=padding,
                             output_padding=output_padding)
    return check_finite(out, "conv2d_transpose output")


def _div(a: Tensor, b: Tensor) -> Tensor:
    if (b.detach().abs() < DIV_EPS).any():
        raise NumericError("division by a value smaller than eps in magnitude")
    return a / b


_BINARY = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "div": _div,
}
_UNARY = {
    "exp": torch.exp,
    "softplus": F.softplus,
    "sigmoid": torch.sigmoid,
    "relu": torch.relu,
    "leaky_relu": lambda x: F.leaky_relu(x, LEAKY_SLOPE),
}


def elementwise(op_kind: str, *args: Tensor) -> Tensor:
    """Apply a named pointwise op with broadcasting."""
    if op_kind in _BINARY:
        if len(args) != 2:
            raise UsageError(f"{op_kind} takes two arguments")
        a, b = args
        try:
            torch.broadcast_shapes(a.shape, b.shape)
        except RuntimeError as exc:
            raise DimensionError(str(exc)) from exc
        out = _BINARY[op_kind](a, b)
    elif op_kind in _UNARY:
        if len(args) != 1:
            raise UsageError(f"{op_kind} takes one argument")
        out = _UNARY[op_kind](args[0])
    else:
        raise UsageError(f"unknown elementwise op {op_kind!r}")
    return check_finite(out, op_kind)


def backward(loss: Tensor, params: Iterable[Tensor]) -> None:
    """Populate ``.grad`` of every tensor in ``params`` with dloss/dparam.

    Gradients are overwritten, never accumulated. Parameters not reached by
    the loss get a zero gradient.
    """
    if loss.numel() != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    params = [p for p in params if p.requires_grad]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g.detach()


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path: str | Path, params: Mapping[str, Tensor], metadata: dict) -> None:
    """Write named parameters plus a JSON metadata blob.

    Layout (little-endian): magic, u16 version, u32 count, then per entry
    u16 name length, name, u8 dtype code, u8 ndim, u32 extents, raw values;
    finally u32 json length and the json bytes.
    """
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<HI", CKPT_VERSION, len(params))
    for name, t in params.items():
        t = t.detach().contiguous().cpu()
        if t.dtype not in _DTYPE_CODES:
            raise UsageError(f"unsupported dtype {t.dtype} for {name}")
        raw_name = name.encode()
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<BB", _DTYPE_CODES[t.dtype], t.dim())
        out += struct.pack(f"<{t.dim()}I", *t.shape)
        out += t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
    blob = json.dumps(metadata, sort_keys=True).encode()
    out += struct.pack("<I", len(blob)) + blob
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CorruptStreamError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<HI", data, 8)
        if version != CKPT_VERSION:
            raise CorruptStreamError(f"{path}: unsupported checkpoint version {version}")
        pos = 14
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode()
            pos += nlen
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            dtype = _CODE_DTYPES[code]
            n = 1
            for s in shape:
                n *= s
            itemsize = torch.tensor([], dtype=dtype).element_size()
            chunk = data[pos:pos + n * itemsize]
            if len(chunk) != n * itemsize:
                raise CorruptStreamError(f"{path}: truncated tensor {name}")
            pos += n * itemsize
            np_dtype = "<f8" if dtype == torch.float64 else "<f4"
            params[name] = torch.from_numpy(np.frombuffer(chunk, dtype=np_dtype).copy()).reshape(shape)
        (jlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        metadata = json.loads(data[pos:pos + jlen].decode())
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptStreamError(f"{path}: malformed checkpoint ({exc})") from exc
    return params, metadata
