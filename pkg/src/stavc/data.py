"""Synthetic training clips and frame-sequence ingestion."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter, zoom

from .errors import IngestionError

FRAME_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm"}


@dataclass
class Clip:
    """Time-ordered frames, ``[T, 3, H, W]`` float64 in ``[0, 1]``."""

    frames: torch.Tensor
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[-2]

    @property
    def width(self) -> int:
        return self.frames.shape[-1]

    def crop(self, top: int, left: int, h: int, w: int) -> "Clip":
        return Clip(self.frames[..., top:top + h, left:left + w].clone(), dict(self.info))


@dataclass
class SyntheticSource:
    """Seeded generator of textured sprites moving over a panning background.

    ``fixed_velocity`` forces every layer to move by the same integer
    ``(dx, dy)`` per frame, which makes consecutive frames exact shifts.
    """

    size: int = 96
    sprites: int = 3
    max_velocity: int = 3
    texture: str = "mixed"
    blur_prob: float = 0.2
    blur_rate: float = 0.6
    occlusion_prob: float = 0.3
    seed: int = 0
    fixed_velocity: tuple[int, int] | None = None

    def rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, index])


def _texture(rng: np.random.Generator, h: int, w: int, kind: str) -> np.ndarray:
    if kind == "mixed":
        kind = ("noise", "stripes", "checker")[rng.integers(3)]
    if kind == "noise":
        coarse = rng.random((max(2, h // 8), max(2, w // 8), 3))
        tex = zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1], 1), order=1)[:h, :w]
        tex = 0.7 * tex + 0.3 * gaussian_filter(rng.random((h, w, 3)), (1, 1, 0))
    elif kind == "stripes":
        period = rng.uniform(4, 16)
        angle = rng.uniform(0, np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        phase = (xx * np.cos(angle) + yy * np.sin(angle)) * 2 * np.pi / period
        base = 0.5 + 0.4 * np.sin(phase)
        tint = rng.uniform(0.3, 1.0, 3)
        tex = base[..., None] * tint
    elif kind == "checker":
        cell = int(rng.integers(3, 10))
        yy, xx = np.mgrid[0:h, 0:w]
        base = ((yy // cell + xx // cell) % 2).astype(np.float64)
        a, b = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        tex = base[..., None] * a + (1 - base[..., None]) * b
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    return np.clip(tex, 0.0, 1.0)


def generate_clip(source: SyntheticSource, length: int, index: int = 0) -> Clip:
    """Render clip number ``index`` of the source's deterministic stream."""
    if length < 2:
        raise ValueError("clips need at least two frames")
    rng = source.rng(index)
    n = source.size
    vmax = source.max_velocity

    def velocity() -> np.ndarray:
        if source.fixed_velocity is not None:
            return np.array(source.fixed_velocity, dtype=int)
        return rng.integers(-vmax, vmax + 1, size=2)

    margin = vmax * length + 1 if source.fixed_velocity is None else \
        max(abs(v) for v in source.fixed_velocity) * length + 1
    bg = _texture(rng, n + 2 * margin, n + 2 * margin, source.texture)
    cam = velocity()

    sprites = []
    for _ in range(source.sprites):
        sh, sw = (int(s) for s in rng.integers(n // 6, n // 2, size=2))
        tex = _texture(rng, sh, sw, source.texture)
        yy, xx = np.mgrid[0:sh, 0:sw]
        if rng.random() < 0.5:
            mask = ((yy - sh / 2 + 0.5) / (sh / 2)) ** 2 + ((xx - sw / 2 + 0.5) / (sw / 2)) ** 2 <= 1
        else:
            mask = np.ones((sh, sw), dtype=bool)
        pos = rng.integers(-sh // 2, n - sh // 2, size=2)
        appear = int(rng.integers(1, length)) if rng.random() < source.occlusion_prob else 0
        sprites.append(dict(tex=tex, mask=mask, pos=pos, vel=velocity(), appear=appear))

    blur_start = int(rng.integers(1, length)) if rng.random() < source.blur_prob else None

    frames, sigmas = [], []
    for t in range(length):
        oy, ox = margin - t * cam[1], margin - t * cam[0]
        frame = bg[oy:oy + n, ox:ox + n].copy()
        for sp in sprites:
            if t < sp["appear"]:
                continue
            top, left = sp["pos"][1] + t * sp["vel"][1], sp["pos"][0] + t * sp["vel"][0]
            _paste(frame, sp["tex"], sp["mask"], int(top), int(left))
        sigma = 0.0 if blur_start is None or t < blur_start else source.blur_rate * (t - blur_start + 1)
        if sigma > 0:
            frame = gaussian_filter(frame, (sigma, sigma, 0), mode="nearest")
        sigmas.append(sigma)
        frames.append(frame)
    arr = np.clip(np.stack(frames), 0.0, 1.0).transpose(0, 3, 1, 2)
    info = {"camera_velocity": cam.tolist(), "blur_sigmas": sigmas, "index": index}
    return Clip(torch.from_numpy(np.ascontiguousarray(arr)), info)


def _paste(frame: np.ndarray, tex: np.ndarray, mask: np.ndarray, top: int, left: int) -> None:
    h, w = frame.shape[:2]
    sh, sw = mask.shape
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + sh, h), min(left + sw, w)
    if y0 >= y1 or x0 >= x1:
        return
    sub_mask = mask[y0 - top:y1 - top, x0 - left:x1 - left]
    region = frame[y0:y1, x0:x1]
    region[sub_mask] = tex[y0 - top:y1 - top, x0 - left:x1 - left][sub_mask]


# -- files --------------------------------------------------------------------

def _frame_number(path: Path) -> tuple[int, str]:
    digits = re.findall(r"\d+", path.stem)
    return (int(digits[-1]) if digits else -1, path.name)


def _load_image(path: Path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    if img.mode == "L":
        img = img.convert("RGB")
    if img.mode != "RGB":
        raise IngestionError(f"{path}: unsupported mode/bit depth {img.mode!r} (need 8-bit RGB or L)")
    return np.asarray(img, dtype=np.float64) / 255.0


def load_frames(path: str | Path) -> Clip:
    """Load numbered PNG/PPM frames from a directory, or a raw planar RGB file.

    A raw file ``x.rgb`` needs a sidecar ``x.rgb.json`` with ``width`` and
    ``height``; frames are stored as consecutive 8-bit R, G, B planes.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted((p for p in path.iterdir() if p.suffix.lower() in FRAME_SUFFIXES),
                       key=_frame_number)
        if not files:
            raise IngestionError(f"{path}: no PNG/PPM frames found")
        frames = []
        for f in files:
            arr = _load_image(f)
            if frames and arr.shape != frames[0].shape:
                raise IngestionError(f"{f}: size {arr.shape[:2]} differs from {frames[0].shape[:2]}")
            frames.append(arr)
        data = np.stack(frames).transpose(0, 3, 1, 2)
        return Clip(torch.from_numpy(np.ascontiguousarray(data)), {"source": str(path)})
    if path.is_file():
        sidecar = path.with_name(path.name + ".json")
        if not sidecar.exists():
            raise IngestionError(f"{path}: raw input needs a sidecar {sidecar.name} with width/height")
        dims = json.loads(sidecar.read_text())
        w, h = int(dims["width"]), int(dims["height"])
        if dims.get("bit_depth", 8) != 8:
            raise IngestionError(f"{path}: unsupported bit depth {dims['bit_depth']}")
        raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        per_frame = 3 * w * h
        if raw.size == 0 or raw.size % per_frame:
            raise IngestionError(f"{path}: {raw.size} bytes is not a whole number of {w}x{h} frames")
        data = raw.reshape(-1, 3, h, w).astype(np.float64) / 255.0
        return Clip(torch.from_numpy(data), {"source": str(path)})
    raise IngestionError(f"{path}: no such file or directory")


def save_frames(clip: Clip | torch.Tensor, directory: str | Path, prefix: str = "frame") -> list[Path]:
    """Write frames as 8-bit PNGs named ``<prefix>_00000.png`` etc."""
    frames = clip.frames if isinstance(clip, Clip) else clip
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for t, f in enumerate(frames):
        arr = np.round(f.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255).astype(np.uint8)
        p = directory / f"{prefix}_{t:05d}.png"
        Image.fromarray(arr).save(p)
        out.append(p)
    return out
