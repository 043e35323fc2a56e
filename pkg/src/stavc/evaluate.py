"""Rate-distortion metrics, sweeps and the external-codec comparison harness."""
from __future__ import annotations

import csv
import io
import logging
import math
import shutil
import subprocess
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from torch import Tensor

from .codec import encode_video, verify_roundtrip
from .data import Clip, load_frames, save_frames
from .errors import StavcError, UsageError
from .transforms import VideoModel

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
CSV_FIELDS = ("variant", "beta", "bpp", "psnr", "frames", "seconds")


def psnr(a: Tensor, b: Tensor) -> float:
    """10*log10(1/MSE) for frames in [0, 1]; ``inf`` when they are identical."""
    if a.shape != b.shape:
        raise UsageError(f"psnr of mismatched shapes {tuple(a.shape)} and {tuple(b.shape)}")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def mean_psnr(frames_a: Tensor, frames_b: Tensor) -> float:
    """Average of per-frame PSNR, each capped at ``PSNR_CAP``."""
    if frames_a.shape != frames_b.shape:
        raise UsageError("clips differ in shape")
    values = [min(psnr(x, y), PSNR_CAP) for x, y in zip(frames_a, frames_b)]
    return sum(values) / len(values)


def bpp(nbytes: int, frames: int, height: int, width: int) -> float:
    """Bits per pixel; callers pass the full stream size (header included)."""
    return 8.0 * nbytes / (frames * height * width)


@dataclass
class RDPoint:
    variant: str
    beta: float
    bpp: float
    psnr: float
    frames: int
    seconds: float = 0.0
    dataset: str = ""
    estimated_bpp: float | None = None

    def csv_row(self) -> dict:
        return {"variant": self.variant, "beta": f"{self.beta:g}", "bpp": f"{self.bpp:.6f}",
                "psnr": f"{self.psnr:.4f}", "frames": self.frames,
                "seconds": f"{self.seconds:.3f}"}


@dataclass
class EvalReport:
    points: list[RDPoint]
    per_frame: list[dict] = field(default_factory=list)
    config_hashes: list[int] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for p in sorted(self.points, key=lambda p: (p.bpp, p.variant, p.beta)):
            writer.writerow(p.csv_row())
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"points": [asdict(p) for p in self.points], "per_frame": self.per_frame,
                "config_hashes": self.config_hashes}


@dataclass
class ClipEvaluation:
    nbytes: int
    estimated_bits: float
    frame_psnr: list[float]
    frame_bits: list[int]
    seconds: float


def evaluate_clip(model: VideoModel, clip: Clip | Tensor, beta: float = 0.0) -> ClipEvaluation:
    """Encode, decode (demanding synchrony), and measure one clip."""
    frames = clip.frames if isinstance(clip, Clip) else clip
    start = time.perf_counter()
    result = encode_video(frames, model, beta)
    decoded = verify_roundtrip(result, model)
    seconds = time.perf_counter() - start
    return ClipEvaluation(
        nbytes=len(result.stream),
        estimated_bits=result.estimated_bits,
        frame_psnr=[min(psnr(a, b), PSNR_CAP) for a, b in zip(frames, decoded)],
        frame_bits=[f.chunk_bits for f in result.frames],
        seconds=seconds,
    )


def rd_sweep(checkpoints: Sequence[str | Path], clips: Sequence[tuple[str, Clip]],
             out: str | Path | None = None, record_timing: bool = True,
             dataset: str = "") -> EvalReport:
    """One RD point per checkpoint, pooled over all clips.

    Any encoder/decoder mismatch raises ``SyncError`` and aborts the sweep.
    With ``record_timing=False`` the seconds column is zero so the CSV is
    byte-stable across runs.
    """
    if not clips:
        raise UsageError("rd_sweep needs at least one clip")
    points, per_frame, hashes = [], [], []
    dims = None
    for ckpt in checkpoints:
        model, meta = VideoModel.load(ckpt)
        beta = float(meta.get("beta", 0.0))
        total_bytes = total_pixels = 0
        total_est = 0.0
        all_psnr: list[float] = []
        seconds = 0.0
        for name, clip in clips:
            this_dims = (clip.height, clip.width)
            dims = dims or this_dims
            ev = evaluate_clip(model, clip, beta)
            total_bytes += ev.nbytes
            total_est += ev.estimated_bits
            total_pixels += len(clip) * clip.height * clip.width
            all_psnr.extend(ev.frame_psnr)
            seconds += ev.seconds
            for t, (p, b) in enumerate(zip(ev.frame_psnr, ev.frame_bits)):
                per_frame.append({"checkpoint": str(ckpt), "clip": name, "frame": t,
                                  "psnr": p, "bits": b})
        points.append(RDPoint(
            variant=model.cfg.variant.name + ("+SP" if model.cfg.structured_prior else ""),
            beta=beta,
            bpp=8.0 * total_bytes / total_pixels,
            psnr=sum(all_psnr) / len(all_psnr),
            frames=len(all_psnr),
            seconds=seconds if record_timing else 0.0,
            dataset=dataset,
            estimated_bpp=total_est / total_pixels,
        ))
        hashes.append(model.cfg.config_hash())
        log.info("%s beta=%g: %.4f bpp, %.2f dB", points[-1].variant, beta, points[-1].bpp,
                 points[-1].psnr)
    report = EvalReport(sorted(points, key=lambda p: (p.bpp, p.variant, p.beta)), per_frame, hashes)
    if out is not None:
        Path(out).write_text(report.to_csv())
    return report


def comparison_table(points: Iterable[RDPoint]) -> str:
    """Markdown table of bpp/PSNR per variant, one row per beta."""
    points = list(points)
    variants = sorted({p.variant for p in points})
    betas = sorted({p.beta for p in points})
    by_key = {(p.variant, p.beta): p for p in points}
    lines = ["| beta | " + " | ".join(f"{v} bpp | {v} PSNR" for v in variants) + " |",
             "|---|" + "---|---|" * len(variants)]
    for b in betas:
        cells = []
        for v in variants:
            p = by_key.get((v, b))
            cells += [f"{p.bpp:.4f}", f"{p.psnr:.2f}"] if p else ["-", "-"]
        lines.append(f"| {b:g} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# -- external codec -----------------------------------------------------------

@dataclass
class HarnessResult:
    status: str  # "ok", "partial", "unavailable"
    points: list[RDPoint]
    errors: list[str] = field(default_factory=list)


class HarnessError(StavcError):
    """The external encoder exited with an error."""


def _run(cmd: list[str]) -> None:
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise HarnessError(f"{' '.join(cmd[:2])} ... exited {proc.returncode}: {proc.stderr.strip()[-500:]}")


def external_codec_harness(frames_dir: str | Path, quality_list: Sequence[int],
                           rgb: bool = True, ffmpeg: str = "ffmpeg") -> HarnessResult:
    """HEVC reference points via ffmpeg/x265 in low-latency mode (no B-frames).

    Frames are first written as lossless PNGs, then encoded with
    ``-x265-params bframes=0 -crf <q>``. ``rgb=True`` keeps the planar RGB
    pixel format so the classical codec does not benefit from 4:2:0
    chroma subsampling.
    """
    exe = shutil.which(ffmpeg)
    if exe is None:
        return HarnessResult("unavailable", [], [f"{ffmpeg} not found on PATH"])
    clip = load_frames(frames_dir)
    t, h, w = len(clip), clip.height, clip.width
    points, errors = [], []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        src = tmp / "png"
        save_frames(clip, src, prefix="frame")
        for q in quality_list:
            out_file = tmp / f"q{q}.mkv"
            dec_dir = tmp / f"dec{q}"
            dec_dir.mkdir()
            cmd = [exe, "-y", "-loglevel", "error", "-i", str(src / "frame_%05d.png"),
                   "-c:v", "libx265"]
            if rgb:
                cmd += ["-pix_fmt", "gbrp"]
            cmd += ["-x265-params", "bframes=0", "-crf", str(q), str(out_file)]
            try:
                start = time.perf_counter()
                _run(cmd)
                _run([exe, "-y", "-loglevel", "error", "-i", str(out_file),
                      str(dec_dir / "frame_%05d.png")])
                seconds = time.perf_counter() - start
                decoded = load_frames(dec_dir)
                if decoded.frames.shape != clip.frames.shape:
                    raise HarnessError(f"decoded shape {tuple(decoded.frames.shape)} differs")
            except (HarnessError, StavcError, OSError) as exc:
                errors.append(f"crf {q}: {exc}")
                continue
            points.append(RDPoint(
                variant="HEVC-RGB" if rgb else "HEVC-YUV420", beta=float(q),
                bpp=bpp(out_file.stat().st_size, t, h, w),
                psnr=mean_psnr(clip.frames, decoded.frames), frames=t, seconds=seconds,
                dataset=str(frames_dir)))
    status = "ok" if not errors else ("partial" if points else "failed")
    return HarnessResult(status, points, errors)
