"""Lossless patch codec standing in for the video VAE, plus latent-space fusion.

The codec is a space-to-channel rearrangement: a ``(H, W, C)`` frame becomes a
``(H/p, W/p, C*p*p)`` latent, and decoding undoes it bit-exactly.
"""

from dataclasses import dataclass

import numpy as np

from .errors import BadParams, DimMismatch, DimNotDivisible

DEPTH_RANGE = (0.1, 20.0)
# Depth maps are replicated to three channels so RGB and depth latents share a width.
DEPTH_CHANNELS = 3
DEFAULT_PATCH = 4
TAGS = ("rgb", "depth", "geometry", "fused", "joint", "raw")


@dataclass(frozen=True, eq=False)
class LatentSeq:
    data: np.ndarray  # (views, height, width, channels)
    tag: str = "raw"

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise DimMismatch(f"latent data must be 4-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DimMismatch("latent data contains non-finite values")
        if self.tag not in TAGS:
            raise BadParams(f"unknown latent tag {self.tag!r}")
        object.__setattr__(self, "data", arr)

    @property
    def views(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def channels(self):
        return self.data.shape[3]

    @property
    def shape(self):
        return self.data.shape

    def permute_views(self, perm):
        return LatentSeq(self.data[np.asarray(perm)], self.tag)


def _stack(video):
    frames = [np.asarray(f) for f in video]
    if not frames:
        raise DimMismatch("cannot encode an empty video")
    frames = [f[:, :, None] if f.ndim == 2 else f for f in frames]
    if len({f.shape for f in frames}) != 1:
        raise DimMismatch("all frames must share one shape")
    return np.stack(frames)


def encode(video, patch=DEFAULT_PATCH, tag="raw"):
    """Patchify a list of ``(H, W, C)`` frames or ``(H, W)`` maps."""
    x = _stack(video)
    v, h, w, c = x.shape
    if h % patch or w % patch:
        raise DimNotDivisible(f"{h}x{w} is not divisible by patch {patch}")
    x = x.reshape(v, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5).reshape(v, h // patch, w // patch, patch * patch * c)
    return LatentSeq(np.ascontiguousarray(x), tag)


def decode(latent, patch=DEFAULT_PATCH):
    """Inverse of :func:`encode`; returns a list of ``(H, W, C)`` frames."""
    v, h, w, ch = latent.shape
    if ch % (patch * patch):
        raise DimMismatch(f"{ch} channels cannot be split into {patch}x{patch} patches")
    c = ch // (patch * patch)
    x = latent.data.reshape(v, h, w, patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(v, h * patch, w * patch, c)
    return [np.ascontiguousarray(f) for f in x]


def normalize_depth(depth, lo=DEPTH_RANGE[0], hi=DEPTH_RANGE[1]):
    return (np.asarray(depth, dtype=np.float32) - np.float32(lo)) / np.float32(hi - lo)


def denormalize_depth(value, lo=DEPTH_RANGE[0], hi=DEPTH_RANGE[1]):
    return np.asarray(value, dtype=np.float32) * np.float32(hi - lo) + np.float32(lo)


def encode_depth(depths, patch=DEFAULT_PATCH, tag="depth"):
    """Normalize depth maps to [0, 1], replicate to DEPTH_CHANNELS, and patchify."""
    maps = [normalize_depth(d) for d in depths]
    return encode([np.repeat(m[:, :, None], DEPTH_CHANNELS, axis=2) for m in maps], patch, tag)


def decode_depth(latent, patch=DEFAULT_PATCH):
    """Decode a depth latent: average the replicated channels, clamp, denormalize."""
    out = []
    for f in decode(latent, patch):
        n = np.clip(f.mean(axis=2), 0.0, 1.0)
        out.append(denormalize_depth(n))
    return out


def concat_channels(a, b, tag=None):
    """Channel-concatenate two latents; a 1-view ``b`` is broadcast over ``a``'s views."""
    bd = b.data
    if b.views == 1 and a.views > 1:
        bd = np.repeat(bd, a.views, axis=0)
    if a.shape[:3] != bd.shape[:3]:
        raise DimMismatch(f"cannot concatenate {a.shape} with {b.shape}")
    return LatentSeq(np.concatenate([a.data, bd], axis=3), tag or a.tag)


@dataclass(frozen=True, eq=False)
class ProjectionParams:
    """Per-position linear map from ``2*C`` to ``C`` channels."""

    weight: np.ndarray  # (2C, C)
    bias: np.ndarray  # (C,)

    def __post_init__(self):
        w = np.asarray(self.weight)
        b = np.asarray(self.bias)
        if w.ndim != 2 or b.shape != (w.shape[1],) or w.shape[0] != 2 * w.shape[1]:
            raise DimMismatch(f"projection weight {w.shape} / bias {b.shape} are inconsistent")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise DimMismatch("projection parameters must be finite")

    @classmethod
    def zeros(cls, channels):
        return cls(np.zeros((2 * channels, channels), np.float32), np.zeros(channels, np.float32))

    @property
    def channels(self):
        return self.weight.shape[1]


def fuse(z_rgb, z_geo, weight, bias):
    """Array-level fusion ``concat(z_rgb, z_geo) @ weight + bias + z_geo`` over the last axis.

    Works for numpy arrays and torch tensors alike.
    """
    if hasattr(z_rgb, "detach"):
        import torch

        cat = torch.cat([z_rgb, z_geo], dim=-1)
    else:
        cat = np.concatenate([z_rgb, z_geo], axis=-1)
    return cat @ weight + bias + z_geo


def fuse_appearance_input(z_rgb, z_geo, proj):
    """Appearance conditioning: project the concatenated latents and add z_geo back."""
    if z_rgb.shape != z_geo.shape:
        raise DimMismatch(f"z_rgb {z_rgb.shape} and z_geo {z_geo.shape} differ")
    if proj.weight.shape[0] != z_rgb.channels + z_geo.channels:
        raise DimMismatch("projection input width does not match the latents")
    if proj.channels != z_geo.channels:
        raise DimMismatch("projection output width must equal the geometry latent width")
    out = fuse(z_rgb.data, z_geo.data, proj.weight, proj.bias)
    return LatentSeq(out.astype(z_rgb.data.dtype, copy=False), "fused")
