"""Pluggable latent adapter between pixel and latent space.

At desk scale the adapter is the identity over synthetic latents: encode
reads a stored .npy latent as-is, decode maps a latent to 8-bit RGB by a
linear rescale plus nearest-neighbor upsampling by the declared downsample
factor. A production VAE implements the same three-member surface.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ValidationError


class IdentityLatentAdapter:
    """Identity encoder over pre-computed latents.

    downsample_factor declares the pixel/latent scale (8 mirrors the
    16-channel VAE family this stands in for), so a requested image size
    of (H, W) pixels maps to a latent of (H/f, W/f).
    """

    def __init__(self, downsample_factor: int = 8):
        if downsample_factor < 1:
            raise ValidationError(f"downsample_factor must be >= 1, got {downsample_factor}")
        self.downsample_factor = downsample_factor

    def encode(self, path) -> np.ndarray:
        path = Path(path)
        if path.suffix != ".npy":
            raise ValidationError(
                f"identity adapter reads .npy latents, got {path.name!r}"
            )
        latent = np.load(path)
        if latent.ndim != 3:
            raise ValidationError(f"{path.name}: latent must be [C,H,W], got {latent.shape}")
        return latent.astype(np.float32)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        """Latent [C,H,W] -> uint8 RGB [H*f, W*f, 3] via linear rescale."""
        latent = np.asarray(latent, dtype=np.float32)
        c = latent.shape[0]
        if c >= 3:
            rgb = latent[:3]
        else:
            rgb = np.repeat(latent[:1], 3, axis=0)
        lo, hi = float(rgb.min()), float(rgb.max())
        span = hi - lo if hi > lo else 1.0
        scaled = (rgb - lo) / span * 255.0
        f = self.downsample_factor
        up = np.repeat(np.repeat(scaled, f, axis=1), f, axis=2)
        return np.clip(np.rint(up), 0, 255).astype(np.uint8).transpose(1, 2, 0)

    def latent_shape(self, channels: int, image_height: int, image_width: int) -> tuple:
        f = self.downsample_factor
        if image_height % f or image_width % f:
            raise ValidationError(
                f"image size {image_height}x{image_width} not divisible by "
                f"downsample factor {f}"
            )
        return (channels, image_height // f, image_width // f)
