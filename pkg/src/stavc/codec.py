"""Bitstream container and the frame-sequential encoder/decoder.

File layout, little-endian::

    header   magic "STAVC1", u16 version, u8 variant, u8 flags, u16 width,
             u16 height, u32 frame_count, u32 config_hash, f64 beta
    frames   u8 kind (0 = I, 1 = P), u32 length, then ``length`` bytes:
             per latent tensor the variant carries, a support record
             (zigzag varint lower bound, varint size), followed by one
             range-coded payload holding those tensors in decode order
    trailer  u32 CRC32 of everything before it

I-frames carry (hyper, latent); P-frames carry (w_hyper, w, v_hyper, v).
The v prior may depend on the decoded w, so the order is fixed.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import Tensor

from .entropy import MAX_SUPPORT, FactorizedPrior, pmf_to_freqs, quantize_eval, support_of
from .errors import CorruptStreamError, SyncError, UsageError
from .rangecoder import RangeDecoder, RangeEncoder, cumulative_tables
from .transforms import Variant, VideoModel

MAGIC = b"STAVC1"
VERSION = 1
_HEADER = struct.Struct("<6sHBBHHIId")
_FRAME = struct.Struct("<BI")
I_FRAME, P_FRAME = 0, 1


@dataclass
class StreamHeader:
    variant: Variant
    structured_prior: bool
    width: int
    height: int
    frame_count: int
    config_hash: int
    beta: float

    def pack(self) -> bytes:
        return _HEADER.pack(MAGIC, VERSION, int(self.variant), int(self.structured_prior),
                            self.width, self.height, self.frame_count, self.config_hash,
                            self.beta)

    @classmethod
    def unpack(cls, data: bytes) -> "StreamHeader":
        if len(data) < _HEADER.size:
            raise CorruptStreamError("stream shorter than its header")
        magic, version, variant, flags, w, h, n, chash, beta = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CorruptStreamError("not a STAVC1 stream (bad magic)")
        if version != VERSION:
            raise CorruptStreamError(f"unsupported stream version {version}")
        try:
            variant = Variant(variant)
        except ValueError:
            raise CorruptStreamError(f"unknown variant id {variant}") from None
        return cls(variant, bool(flags & 1), w, h, n, chash, beta)


@dataclass
class FrameChunk:
    kind: int
    body: bytes

    def pack(self) -> bytes:
        return _FRAME.pack(self.kind, len(self.body)) + self.body


@dataclass
class Bitstream:
    header: StreamHeader
    frames: list[FrameChunk]

    def to_bytes(self) -> bytes:
        out = bytearray(self.header.pack())
        for f in self.frames:
            out += f.pack()
        out += struct.pack("<I", zlib.crc32(out))
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        header = StreamHeader.unpack(data)
        if len(data) < _HEADER.size + 4:
            raise CorruptStreamError("stream is missing its checksum")
        (crc,) = struct.unpack_from("<I", data, len(data) - 4)
        if zlib.crc32(data[:-4]) != crc:
            raise CorruptStreamError("checksum mismatch")
        pos, end = _HEADER.size, len(data) - 4
        frames = []
        for _ in range(header.frame_count):
            if pos + _FRAME.size > end:
                raise CorruptStreamError("stream truncated inside the frame table")
            kind, length = _FRAME.unpack_from(data, pos)
            pos += _FRAME.size
            if pos + length > end:
                raise CorruptStreamError("frame chunk length runs past the end of the stream")
            frames.append(FrameChunk(kind, data[pos:pos + length]))
            pos += length
        if pos != end:
            raise CorruptStreamError(f"{end - pos} trailing bytes after the last frame")
        return cls(header, frames)


# -- per-frame coding ---------------------------------------------------------

@dataclass
class EncodedFrame:
    chunk: FrameChunk
    recon: Tensor
    estimated_bits: float
    payload_bits: int
    tensor_bits: dict[str, float] = field(default_factory=dict)

    @property
    def chunk_bits(self) -> int:
        return 8 * len(self.chunk.pack())


class _Step:
    """One latent tensor of a frame: its name, shape and prior, given earlier hats."""

    def __init__(self, name: str, shape: tuple[int, ...] | None,
                 prior: Callable[[dict[str, Tensor]], object]):
        self.name = name
        self.shape = shape
        self.prior = prior


def _latent_hw(model: VideoModel, h: int, w: int) -> tuple[int, int]:
    f = 2 ** model.cfg.blocks
    return h // f, w // f


def _hyper_hw(hw: tuple[int, int]) -> tuple[int, int]:
    return (hw[0] + 1) // 2, (hw[1] + 1) // 2


def _steps(model: VideoModel, kind: int, h: int, w: int) -> list[_Step]:
    cfg = model.cfg
    lhw = _latent_hw(model, h, w)
    hhw = _hyper_hw(lhw)
    lshape = (1, cfg.latent_channels, *lhw)
    hshape = (1, cfg.hyper_channels, *hhw)
    if kind == I_FRAME:
        m = model.iframe
        return [
            _Step("v_hyper", hshape, lambda d: m.hyper_prior),
            _Step("v", lshape, lambda d: m.hyper_synthesis(d["v_hyper"], lhw)),
        ]
    p = model.pframe
    has_w = p.variant.has_w
    return [
        _Step("w_hyper", hshape if has_w else None, lambda d: p.w_hyper_prior),
        _Step("w", lshape if has_w else None, lambda d: p.w_hyper_synthesis(d["w_hyper"], lhw)),
        _Step("v_hyper", hshape, lambda d: p.v_hyper_prior),
        _Step("v", lshape, lambda d: p.v_prior(d["v_hyper"], d.get("w_hyper"), d.get("w"), lhw)),
    ]


def _tables(prior, shape: tuple[int, ...], lower: int, upper: int):
    """Cumulative tables plus the per-symbol table index (None = one table per symbol)."""
    if isinstance(prior, FactorizedPrior):
        freqs = pmf_to_freqs(prior.pmf_table(lower, upper))
        per_channel = int(np.prod(shape[2:]))
        index = np.repeat(np.arange(shape[1]), per_channel).tolist()
        return cumulative_tables(freqs), index
    return cumulative_tables(pmf_to_freqs(prior.pmf_table(lower, upper))), None


def _put_varint(out: bytearray, n: int) -> None:
    while n >= 0x80:
        out.append((n & 0x7F) | 0x80)
        n >>= 7
    out.append(n)


def _get_varint(data: bytes, pos: int) -> tuple[int, int]:
    n = shift = 0
    while True:
        if pos >= len(data) or shift > 35:
            raise CorruptStreamError("malformed support record")
        b = data[pos]
        pos += 1
        n |= (b & 0x7F) << shift
        shift += 7
        if not b & 0x80:
            return n, pos


def _pack_support(out: bytearray, lower: int, size: int) -> None:
    _put_varint(out, 2 * lower if lower >= 0 else -2 * lower - 1)  # zigzag
    _put_varint(out, size)


def _unpack_support(data: bytes, pos: int) -> tuple[int, int, int]:
    z, pos = _get_varint(data, pos)
    size, pos = _get_varint(data, pos)
    return (z >> 1) ^ -(z & 1), size, pos


def _as_hat(ints: np.ndarray, shape: tuple[int, ...]) -> Tensor:
    return torch.from_numpy(np.asarray(ints, dtype=np.int64).reshape(shape)).to(torch.float64)


@torch.no_grad()
def encode_frame(x: Tensor, prev: Tensor | None, model: VideoModel) -> EncodedFrame:
    """Code one ``[3, H, W]`` frame; ``prev=None`` selects the I-frame path.

    The returned reconstruction is computed from the same integer latents
    and the same decoder calls that ``decode_frame`` uses.
    """
    x = x.unsqueeze(0) if x.dim() == 3 else x
    h, w = x.shape[-2:]
    model.check_frame_shape(h, w)
    if prev is None:
        kind = I_FRAME
        res = model.iframe(x, quantize_eval)
    else:
        kind = P_FRAME
        prev = prev.unsqueeze(0) if prev.dim() == 3 else prev
        res = model.pframe(x, prev, quantize_eval)
    lat = res.latents
    values = {"v_hyper": lat.v_hyper_hat, "v": lat.v_hat,
              "w_hyper": lat.w_hyper_hat, "w": lat.w_hat}

    enc = RangeEncoder()
    records = bytearray()
    hats: dict[str, Tensor] = {}
    estimated = 0.0
    per_tensor = {}
    for step in _steps(model, kind, h, w):
        if step.shape is None:
            continue
        ints = values[step.name].to(torch.int64)
        lower, upper = support_of(ints)
        _pack_support(records, lower, upper - lower + 1)
        prior = step.prior(hats)
        hat = _as_hat(ints.numpy(), step.shape)
        tables, index = _tables(prior, step.shape, lower, upper)
        symbols = (ints.reshape(-1) - lower).tolist()
        rows = index if index is not None else range(len(symbols))
        for s, r in zip(symbols, rows):
            cum = tables[r]
            enc.encode(cum[s], cum[s + 1] - cum[s])
        bits = float(prior.bits(hat).sum())
        per_tensor[step.name] = bits
        estimated += bits
        hats[step.name] = hat
    payload = enc.finish()
    if kind == I_FRAME:
        recon = model.iframe.decode(hats["v"])
    else:
        recon = model.pframe.reconstruct(prev, hats.get("w"), hats["v"])
    chunk = FrameChunk(kind, bytes(records) + payload)
    return EncodedFrame(chunk, recon[0], estimated, 8 * len(payload), per_tensor)


@torch.no_grad()
def decode_frame(chunk: FrameChunk, prev: Tensor | None, model: VideoModel, height: int,
                 width: int) -> Tensor:
    """Inverse of ``encode_frame``; returns the ``[3, H, W]`` reconstruction."""
    kind = chunk.kind
    if kind not in (I_FRAME, P_FRAME):
        raise CorruptStreamError(f"unknown frame kind {kind}")
    if (kind == I_FRAME) != (prev is None):
        raise CorruptStreamError("frame kind does not match decoder state")
    steps = _steps(model, kind, height, width)
    body = chunk.body
    present = [step for step in steps if step.shape is not None]
    supports, pos = [], 0
    for _ in present:
        lower, size, pos = _unpack_support(body, pos)
        supports.append((lower, size))
    dec = RangeDecoder(body[pos:])
    hats: dict[str, Tensor] = {}
    for step, (lower, size) in zip(present, supports):
        if size < 3 or size > MAX_SUPPORT:
            raise CorruptStreamError(f"invalid support size {size} for {step.name}")
        prior = step.prior(hats)
        tables, index = _tables(prior, step.shape, lower, lower + size - 1)
        n = int(np.prod(step.shape))
        rows = index if index is not None else range(n)
        symbols = [dec.decode(tables[r]) for r in rows]
        hats[step.name] = _as_hat(np.asarray(symbols) + lower, step.shape)
    if kind == I_FRAME:
        recon = model.iframe.decode(hats["v"])
    else:
        prev = prev.unsqueeze(0) if prev.dim() == 3 else prev
        recon = model.pframe.reconstruct(prev, hats.get("w"), hats["v"])
    return recon[0]


# -- whole clips --------------------------------------------------------------

@dataclass
class EncodeResult:
    stream: bytes
    recons: Tensor
    frames: list[EncodedFrame]

    @property
    def estimated_bits(self) -> float:
        return sum(f.estimated_bits for f in self.frames)


def make_header(model: VideoModel, frames: int, height: int, width: int, beta: float) -> StreamHeader:
    cfg = model.cfg
    return StreamHeader(cfg.variant, cfg.structured_prior, width, height, frames,
                        cfg.config_hash(), float(beta))


def encode_video(clip: Tensor, model: VideoModel, beta: float = 0.0) -> EncodeResult:
    """Code a ``[T, 3, H, W]`` clip: frame 0 as an I-frame, the rest as P-frames."""
    if clip.dim() != 4 or clip.shape[0] == 0 or clip.shape[1] != 3:
        raise UsageError(f"expected a non-empty [T, 3, H, W] clip, got {tuple(clip.shape)}")
    t, _, h, w = clip.shape
    model.check_frame_shape(h, w)
    if h > 0xFFFF or w > 0xFFFF:
        raise UsageError("frame extents above 65535 are not representable")
    coded = []
    prev = None
    for i in range(t):
        ef = encode_frame(clip[i], prev, model)
        coded.append(ef)
        prev = ef.recon
    stream = Bitstream(make_header(model, t, h, w, beta), [f.chunk for f in coded])
    return EncodeResult(stream.to_bytes(), torch.stack([f.recon for f in coded]), coded)


def check_compatible(header: StreamHeader, model: VideoModel) -> None:
    cfg = model.cfg
    if header.variant != cfg.variant:
        raise UsageError(f"stream variant {header.variant.name} does not match "
                         f"checkpoint variant {cfg.variant.name}")
    if header.structured_prior != cfg.structured_prior or header.config_hash != cfg.config_hash():
        raise UsageError("stream was produced with a different model configuration")


def decode_video(data: bytes, model: VideoModel) -> Tensor:
    stream = Bitstream.from_bytes(data)
    hdr = stream.header
    check_compatible(hdr, model)
    model.check_frame_shape(hdr.height, hdr.width)
    out = []
    prev = None
    for chunk in stream.frames:
        prev = decode_frame(chunk, prev, model, hdr.height, hdr.width)
        out.append(prev)
    return torch.stack(out)


def verify_roundtrip(result: EncodeResult, model: VideoModel) -> Tensor:
    """Decode ``result.stream`` and demand bit-identical reconstructions."""
    decoded = decode_video(result.stream, model)
    enc = result.recons.numpy()
    dec = decoded.numpy()
    if enc.shape != dec.shape or enc.tobytes() != dec.tobytes():
        diff = np.abs(enc - dec).max() if enc.shape == dec.shape else float("nan")
        raise SyncError(f"decoder reconstruction differs from the encoder's (max |diff| {diff})")
    return decoded


def stream_bpp(data: bytes | int, frames: int, height: int, width: int) -> float:
    """Bits per pixel of a whole stream, header and checksum included."""
    nbytes = data if isinstance(data, int) else len(data)
    return 8.0 * nbytes / (frames * height * width)
