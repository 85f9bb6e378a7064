"""Exactly invertible pixel <-> latent codec.

Stands in for a learned VAE so reconstruction error is zero by construction.
Two modes:

- identity: the latent is the pixel tensor itself (patch_size must be 1).
- orthonormal-patch: s x s spatial blocks are folded into channels
  (space-to-depth), then a fixed seeded orthonormal matrix mixes the channel
  dimension. Orthonormality makes decode an exact transpose.

Depth maps enter the latent space through a per-image affine normalization:
the 2nd/98th percentiles of valid depth map to -1/+1 (clamped), invalid
pixels are filled with the nearest valid value, and the single channel is
replicated to 3 channels before encode_image. This makes the encoding
invariant to positive affine transforms of the input depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage


class CodecError(ValueError):
    pass


class DegenerateInputError(ValueError):
    """Input carries no usable structure (constant depth, empty mask, ...)."""


@dataclass
class PixelImage:
    """Normalized RGB image, channels-first (3, H, W), values in [-1, 1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise CodecError(f"PixelImage expects (3, H, W), got {self.data.shape}")


@dataclass
class DepthMap:
    """Affine-invariant depth, (H, W), with a per-pixel validity mask."""

    data: np.ndarray
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise CodecError(f"DepthMap expects (H, W), got {self.data.shape}")
        if self.valid_mask is None:
            self.valid_mask = np.isfinite(self.data)
        else:
            self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
            if self.valid_mask.shape != self.data.shape:
                raise CodecError("valid_mask shape differs from data shape")


@dataclass(frozen=True)
class CodecConfig:
    mode: str = "identity"          # identity | orthonormal-patch
    patch_size: int = 1
    seed: int = 0                   # seeds the orthonormal mixing matrix

    def __post_init__(self):
        if self.mode not in ("identity", "orthonormal-patch"):
            raise CodecError(f"unknown codec mode {self.mode!r}")
        if self.patch_size < 1:
            raise CodecError("patch_size must be >= 1")
        if self.mode == "identity" and self.patch_size != 1:
            raise CodecError("identity mode requires patch_size=1")


DEPTH_PCT_LO = 2.0
DEPTH_PCT_HI = 98.0


@lru_cache(maxsize=8)
def _mixing_matrix(seed: int, patch_size: int) -> np.ndarray:
    """Fixed orthonormal channel mixer for (seed, patch_size), via QR with a
    canonical sign convention so the matrix is stable across platforms."""
    k = 3 * patch_size * patch_size
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    q = q * np.sign(np.diag(r))
    return q


def _space_to_depth(x: np.ndarray, s: int) -> np.ndarray:
    c, h, w = x.shape
    x = x.reshape(c, h // s, s, w // s, s)
    x = x.transpose(0, 2, 4, 1, 3)           # c, s, s, h/s, w/s
    return x.reshape(c * s * s, h // s, w // s)


def _depth_to_space(z: np.ndarray, s: int, c_out: int) -> np.ndarray:
    k, hh, ww = z.shape
    z = z.reshape(c_out, s, s, hh, ww)
    z = z.transpose(0, 3, 1, 4, 2)            # c, h/s, s, w/s, s
    return z.reshape(c_out, hh * s, ww * s)


def _as_pixel_array(img) -> np.ndarray:
    data = img.data if isinstance(img, PixelImage) else np.asarray(img, dtype=np.float64)
    if data.ndim != 3:
        raise CodecError(f"expected a (C, H, W) tensor, got shape {data.shape}")
    return np.asarray(data, dtype=np.float64)


def encode_image(img, cfg: CodecConfig) -> np.ndarray:
    data = _as_pixel_array(img)
    s = cfg.patch_size
    _, h, w = data.shape
    if h % s or w % s:
        raise CodecError(f"image size {h}x{w} not divisible by patch_size {s}")
    if cfg.mode == "identity":
        return data.copy()
    z = _space_to_depth(data, s)
    q = _mixing_matrix(cfg.seed, s)
    return np.einsum("ij,jhw->ihw", q, z)


def decode_image(z, cfg: CodecConfig) -> PixelImage:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise CodecError(f"latent must be (C, H, W), got {z.shape}")
    if cfg.mode == "identity":
        if z.shape[0] != 3:
            raise CodecError(f"identity latent must have 3 channels, got {z.shape[0]}")
        return PixelImage(z.copy())
    s = cfg.patch_size
    k = 3 * s * s
    if z.shape[0] != k:
        raise CodecError(f"latent has {z.shape[0]} channels, config implies {k}")
    q = _mixing_matrix(cfg.seed, s)
    x = np.einsum("ji,jhw->ihw", q, z)        # Q^T z
    return PixelImage(_depth_to_space(x, s, 3))


def _fill_nearest_valid(data: np.ndarray, valid: np.ndarray) -> np.ndarray:
    if valid.all():
        return data
    # index of the nearest valid pixel for every position
    _, (iy, ix) = ndimage.distance_transform_edt(~valid, return_indices=True)
    return data[iy, ix]


def normalize_depth(d: DepthMap) -> np.ndarray:
    """Maps valid depth so its 2nd/98th percentiles land on -1/+1, clamps to
    [-1, 1], and fills invalid pixels from their nearest valid neighbor."""
    valid = d.valid_mask
    if not valid.any():
        raise DegenerateInputError("depth map has no valid pixels")
    vals = d.data[valid]
    lo, hi = np.percentile(vals, [DEPTH_PCT_LO, DEPTH_PCT_HI])
    if hi - lo <= 0:
        raise DegenerateInputError(
            f"degenerate depth: percentile spread is {hi - lo} (constant input?)"
        )
    norm = 2.0 * (d.data - lo) / (hi - lo) - 1.0
    norm = np.clip(norm, -1.0, 1.0)
    return _fill_nearest_valid(norm, valid)


def encode_depth(d: DepthMap, cfg: CodecConfig) -> np.ndarray:
    norm = normalize_depth(d)
    three = np.repeat(norm[None, :, :], 3, axis=0)
    return encode_image(three, cfg)


def decode_depth(z, cfg: CodecConfig) -> DepthMap:
    img = decode_image(z, cfg)
    depth = img.data.mean(axis=0)
    return DepthMap(depth, np.ones_like(depth, dtype=bool))
