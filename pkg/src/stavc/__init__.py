"""Learned low-latency video codec built on stochastic temporal autoregressive transforms."""

from .codec import decode_video, encode_video
from .transforms import Variant, VariantConfig, VideoModel

__all__ = ["Variant", "VariantConfig", "VideoModel", "decode_video", "encode_video"]
__version__ = "0.1.0"
