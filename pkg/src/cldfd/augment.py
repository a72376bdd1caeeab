"""Stochastic view generation for the distillation and self-supervised losses."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Tuple

import numpy as np

from .numerics.rng import stream

_GRAY = np.array([0.299, 0.587, 0.114], dtype=np.float32)
_TO_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_FROM_YIQ = np.linalg.inv(_TO_YIQ)


def _color_matrix(sat: float, hue_turns: float) -> np.ndarray:
    """RGB->RGB map scaling chroma by ``sat`` and rotating hue in the IQ plane."""
    a = 2 * math.pi * hue_turns
    rot = np.array([[1.0, 0.0, 0.0], [0.0, math.cos(a), -math.sin(a)], [0.0, math.sin(a), math.cos(a)]])
    rot[1:, 1:] *= sat
    return (_FROM_YIQ @ rot @ _TO_YIQ).astype(np.float32)


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale_range: Tuple[float, float] = (0.5, 1.0)
    flip_prob: float = 0.5
    color_jitter_strength: float = 0.4
    grayscale_prob: float = 0.2
    aspect_range: Tuple[float, float] = (3 / 4, 4 / 3)
    saturation_jitter: float = 0.4
    hue_jitter: float = 0.1

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop scale range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        for name in ("flip_prob", "grayscale_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.color_jitter_strength < 0 or self.saturation_jitter < 0:
            raise ValueError("jitter strengths must be nonnegative")
        if not 0 <= self.hue_jitter <= 0.5:
            raise ValueError("hue jitter must lie in [0, 0.5] turns")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls((1.0, 1.0), 0.0, 0.0, 0.0, saturation_jitter=0.0, hue_jitter=0.0)

    def geometric(self) -> "AugmentPolicy":
        """This policy with the color operations switched off (crop and flip only)."""
        return replace(self, color_jitter_strength=0.0, grayscale_prob=0.0, saturation_jitter=0.0, hue_jitter=0.0)

    def to_dict(self):
        return asdict(self)


def _resized_crop(x, top, left, h, w):
    """Bilinear resample of ``x[:, top:top+h, left:left+w]`` back to full size."""
    C, H, W = x.shape
    if h == H and w == W and top == 0 and left == 0:
        return x.copy()
    ys = top + (np.arange(H) + 0.5) * (h / H) - 0.5
    xs = left + (np.arange(W) + 0.5) * (w / W) - 0.5
    ys = np.clip(ys, 0, H - 1)
    xs = np.clip(xs, 0, W - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0).astype(np.float32)[:, None]
    wx = (xs - x0).astype(np.float32)[None, :]
    top_row = x[:, y0][:, :, x0] * (1 - wx) + x[:, y0][:, :, x1] * wx
    bot_row = x[:, y1][:, :, x0] * (1 - wx) + x[:, y1][:, :, x1] * wx
    return (top_row * (1 - wy) + bot_row * wy).astype(np.float32)


def augment_one(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """One stochastic view of ``x[C,H,W]``; shape-preserving, values in [0, 1]."""
    C, H, W = x.shape
    area = H * W
    lo, hi = policy.crop_scale_range
    scale = rng.uniform(lo, hi)
    log_r = rng.uniform(math.log(policy.aspect_range[0]), math.log(policy.aspect_range[1]))
    ratio = math.exp(log_r)
    h = int(round(math.sqrt(area * scale / ratio)))
    w = int(round(math.sqrt(area * scale * ratio)))
    h, w = max(1, min(h, H)), max(1, min(w, W))
    if scale >= 1.0:
        # a crop covering the whole area is the whole frame, whatever the ratio
        h, w = H, W
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    out = _resized_crop(x, top, left, h, w)

    if rng.random() < policy.flip_prob:
        out = out[:, :, ::-1]

    s = policy.color_jitter_strength
    b = rng.uniform(1 - s, 1 + s)
    c = rng.uniform(1 - s, 1 + s)
    if s > 0:
        out = out * np.float32(b)
        m = out.mean()
        out = (out - m) * np.float32(c) + m
    sat = rng.uniform(1 - policy.saturation_jitter, 1 + policy.saturation_jitter)
    hue = rng.uniform(-policy.hue_jitter, policy.hue_jitter)
    if policy.saturation_jitter > 0 or policy.hue_jitter > 0:
        if C == 3:
            out = np.tensordot(_color_matrix(sat, hue), out, axes=(1, 0))

    if rng.random() < policy.grayscale_prob and C == 3:
        g = np.tensordot(_GRAY, out, axes=(0, 0))
        out = np.broadcast_to(g, out.shape)

    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_views(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator, count: int = 3):
    """Independent views ``(x1, x2, x3)`` of one image."""
    return tuple(augment_one(x, policy, rng) for _ in range(count))


def augment_batch(images: np.ndarray, policy: AugmentPolicy, seed: int, tag, views: int = 3):
    """Views for a whole batch; ``tag`` names the batch (e.g. the iteration).

    Sample ``k`` draws from its own stream ``(seed, "augment", tag, k)``, so
    the result does not depend on batch order or on how many views another
    consumer asked for.
    """
    out = np.empty((views,) + images.shape, dtype=np.float32)
    for k in range(len(images)):
        vs = augment_views(images[k], policy, stream(seed, "augment", tag, k), views)
        for v in range(views):
            out[v, k] = vs[v]
    return out
