"""Synthetic two-domain image datasets, the stratified target split, and dataset I/O.

Base classes are filled polygons and stars with class-specific stripe
textures, laid over smooth 1/f background noise. Target classes come from a
disjoint polygon family that the gap knobs morph towards tiled grid patterns
(``geometry``), earth-tone palettes (``palette``) and rougher, stronger noise
(``texture``). With every knob at 0 a target image is drawn from the base
rendering family; only the class definitions differ.

Foreground and background colors are drawn i.i.d. from one palette and every
texture modulation has mean one, so expected pixel intensity does not depend
on how much of the frame a shape covers.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .errors import MissingArtifactError, SplitError
from .numerics.checkpoint import load_container, save_container
from .numerics.rng import stream

CHANNELS = 3


@dataclass(frozen=True)
class GapParams:
    palette: float = 1.0
    texture: float = 1.0
    geometry: float = 1.0

    @classmethod
    def identity(cls) -> "GapParams":
        return cls(0.0, 0.0, 0.0)

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"gap parameter {k}={v} outside [0, 1]")


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    domain_tag: str
    manifest: dict = field(default_factory=dict)
    class_names: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.images[indices],
            self.labels[indices],
            self.class_count,
            self.domain_tag,
            dict(self.manifest),
            list(self.class_names),
        )


@dataclass
class TargetSplit:
    unlabeled_train: np.ndarray
    eval_pool: LabeledDataset
    unlabeled_indices: np.ndarray
    eval_indices: np.ndarray
    fraction: float
    seed: int

    def manifest(self) -> dict:
        return {
            "fraction": self.fraction,
            "seed": self.seed,
            "unlabeled_indices": self.unlabeled_indices.tolist(),
            "eval_indices": self.eval_indices.tolist(),
        }


# --- rendering -------------------------------------------------------------


def _grid(size):
    c = (np.arange(size, dtype=np.float64) + 0.5) / size
    return np.meshgrid(c, c, indexing="ij")


def _smooth_noise(rng, size, slope):
    """Unit-variance noise with a 1/f**slope amplitude spectrum."""
    white = rng.standard_normal((size, size))
    f = np.fft.fftfreq(size)
    rad = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    rad[0, 0] = 1.0
    spec = np.fft.fft2(white) / rad**slope
    spec[0, 0] = 0.0
    field_ = np.real(np.fft.ifft2(spec))
    sd = field_.std()
    return field_ / sd if sd > 0 else field_


def _polygon_mask(size, sides, inner, center, radius, rotation):
    yy, xx = _grid(size)
    n = sides * 2 if inner < 1.0 else sides
    ang = rotation + np.arange(n) * (2 * math.pi / n)
    rad = np.where(np.arange(n) % 2 == 1, radius * inner, radius) if inner < 1.0 else np.full(n, radius)
    vx = center[1] + rad * np.cos(ang)
    vy = center[0] + rad * np.sin(ang)
    inside = np.zeros((size, size), dtype=bool)
    for k in range(n):
        x1, y1, x2, y2 = vx[k], vy[k], vx[(k + 1) % n], vy[(k + 1) % n]
        crosses = (y1 > yy) != (y2 > yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (yy - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xx < xint)
    return inside


def _stripes(size, angle, period, phase):
    yy, xx = _grid(size)
    u = (xx * math.cos(angle) + yy * math.sin(angle)) * size
    return np.sin(2 * math.pi * u / period + phase)


def _base_palette(rng, k):
    return rng.uniform(0.15, 0.85, size=(k, CHANNELS))


def _remap_palette(colors, strength):
    # earth-tone (satellite-like) target palette
    remapped = np.stack(
        [0.05 + 0.55 * colors[:, 0], 0.15 + 0.70 * colors[:, 1], 0.02 + 0.38 * colors[:, 2]], axis=1
    )
    return (1.0 - strength) * colors + strength * remapped


def _base_class_spec(c):
    return {
        "sides": 3 + (c % 4),
        "inner": 1.0 if (c // 4) % 2 == 0 else 0.45,
        "stripe_angle": (c * 0.618034 * math.pi) % math.pi,
        "stripe_period": 4.0 + (c % 3),
    }


_GRID_KINDS = ("stripes", "checker", "dots", "diagonal", "lattice")


def _target_class_spec(c):
    kind = c % len(_GRID_KINDS)
    return {
        "sides": 7 + (c % 3),
        "inner": 1.0 if c % 2 == 0 else 0.7,
        "stripe_angle": (c * 0.618034 * math.pi + math.pi / 16) % math.pi,
        "stripe_period": 4.5 + (c % 3),
        "grid_kind": _GRID_KINDS[kind],
        "grid_period": (6.0, 8.0, 8.0, 6.0, 10.0)[kind] + 2.0 * (c // len(_GRID_KINDS)),
    }


def _render_shape(rng, size, spec, colors):
    """Striped polygon over a flat background, ``[C,H,W]`` before noise."""
    center = rng.uniform(0.38, 0.62, size=2)
    radius = rng.uniform(0.26, 0.40)
    mask = _polygon_mask(size, spec["sides"], spec["inner"], center, radius, rng.uniform(0, 2 * math.pi))
    stripes = 1.0 + 0.3 * _stripes(size, spec["stripe_angle"], spec["stripe_period"], rng.uniform(0, 2 * math.pi))
    fg = colors[0][:, None, None] * stripes[None]
    bg = np.broadcast_to(colors[1][:, None, None], (CHANNELS, size, size))
    return np.where(mask[None], fg, bg)


def _render_grid(rng, size, spec, colors):
    period = spec["grid_period"] * rng.uniform(0.9, 1.1)
    theta = rng.uniform(-0.17, 0.17)
    yy, xx = _grid(size)
    u = (xx * math.cos(theta) + yy * math.sin(theta)) * size + rng.uniform(0, period)
    v = (-xx * math.sin(theta) + yy * math.cos(theta)) * size + rng.uniform(0, period)
    kind = spec["grid_kind"]
    if kind == "stripes":
        pat = (np.floor(u / period) % 2).astype(float)
    elif kind == "checker":
        pat = ((np.floor(u / period) + np.floor(v / period)) % 2).astype(float)
    elif kind == "dots":
        du = (u % period) - period / 2
        dv = (v % period) - period / 2
        pat = (du**2 + dv**2 < (period * 0.3) ** 2).astype(float)
    elif kind == "diagonal":
        pat = (np.floor((u + v) / period) % 2).astype(float)
    else:
        pat = (((u % period) < 2.0) | ((v % period) < 2.0)).astype(float)
    return colors[0][:, None, None] * pat[None] + colors[1][:, None, None] * (1.0 - pat[None])


def _finish(img, rng, size, amp, slope):
    noise = _smooth_noise(rng, size, slope)
    img = img * (1.0 + amp * noise)[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _render_base(rng, size, spec):
    colors = _base_palette(rng, 2)
    return _finish(_render_shape(rng, size, spec, colors), rng, size, 0.15, 2.0)


def _render_target(rng, size, spec, gap: GapParams):
    colors = _remap_palette(_base_palette(rng, 2), gap.palette)
    shape = _render_shape(rng, size, spec, colors)
    if gap.geometry > 0:
        grid = _render_grid(rng, size, spec, colors)
        img = (1.0 - gap.geometry) * shape + gap.geometry * grid
    else:
        img = shape
    amp = 0.15 + 0.10 * gap.texture
    slope = 2.0 - 0.7 * gap.texture
    return _finish(img, rng, size, amp, slope)


# --- public generators -------------------------------------------------------


def generate_base(class_count=8, per_class=100, image_size=32, seed=7) -> LabeledDataset:
    """Labeled base-domain dataset, class-major order, deterministic per seed."""
    if class_count < 2 or per_class < 2:
        raise ValueError("need class_count >= 2 and per_class >= 2")
    n = class_count * per_class
    images = np.empty((n, CHANNELS, image_size, image_size), dtype=np.float32)
    labels = np.repeat(np.arange(class_count, dtype=np.int64), per_class)
    specs = [_base_class_spec(c) for c in range(class_count)]
    for i in range(n):
        images[i] = _render_base(stream(seed, "base", i), image_size, specs[labels[i]])
    manifest = {
        "generator": "base",
        "class_count": class_count,
        "per_class": per_class,
        "image_size": image_size,
        "seed": seed,
    }
    names = [f"{'star' if s['inner'] < 1 else 'poly'}{s['sides']}-{c}" for c, s in enumerate(specs)]
    return LabeledDataset(images, labels, class_count, "base", manifest, names)


def generate_target(class_count=5, per_class=60, image_size=32, gap: Optional[GapParams] = None, seed=11) -> LabeledDataset:
    """Target-domain dataset; labels are kept for evaluation only."""
    if class_count < 2 or per_class < 2:
        raise ValueError("need class_count >= 2 and per_class >= 2")
    gap = gap or GapParams()
    n = class_count * per_class
    images = np.empty((n, CHANNELS, image_size, image_size), dtype=np.float32)
    labels = np.repeat(np.arange(class_count, dtype=np.int64), per_class)
    specs = [_target_class_spec(c) for c in range(class_count)]
    for i in range(n):
        images[i] = _render_target(stream(seed, "target", i), image_size, specs[labels[i]], gap)
    manifest = {
        "generator": "target",
        "class_count": class_count,
        "per_class": per_class,
        "image_size": image_size,
        "gap": asdict(gap),
        "seed": seed,
    }
    names = [f"{s['grid_kind']}-{c}" for c, s in enumerate(specs)]
    return LabeledDataset(images, labels, class_count, "target", manifest, names)


def split_target(dataset: LabeledDataset, fraction: float = 0.2, seed: int = 0) -> TargetSplit:
    """Class-stratified split into an unlabeled training part and a labeled eval pool.

    The total unlabeled count is ``round(fraction * N)``, shared across
    classes by largest remainder so every class is within one image of its
    proportional share.
    """
    if not 0.0 < fraction < 1.0:
        raise SplitError(f"fraction must lie in (0, 1), got {fraction}")
    labels = dataset.labels
    classes = np.arange(dataset.class_count)
    counts = np.array([(labels == c).sum() for c in classes])
    quota = fraction * counts
    take = np.floor(quota).astype(int)
    short = int(round(fraction * len(labels))) - take.sum()
    order = np.lexsort((classes, -(quota - take)))
    take[order[:short]] += 1
    if np.any((counts > 0) & (take >= counts)):
        raise SplitError("split leaves a class with no evaluation images")

    train_idx, eval_idx = [], []
    for c in classes:
        members = np.flatnonzero(labels == c)
        perm = stream(seed, "split", int(c)).permutation(members.size)
        train_idx.append(members[perm[: take[c]]])
        eval_idx.append(members[perm[take[c] :]])
    train_idx = np.sort(np.concatenate(train_idx))
    eval_idx = np.sort(np.concatenate(eval_idx))
    return TargetSplit(
        unlabeled_train=dataset.images[train_idx],
        eval_pool=dataset.subset(eval_idx),
        unlabeled_indices=train_idx,
        eval_indices=eval_idx,
        fraction=fraction,
        seed=seed,
    )


# --- file I/O -----------------------------------------------------------------


def save_dataset(dataset: LabeledDataset, path) -> None:
    """Write the container plus a ``<path>.json`` sidecar manifest."""
    header = {
        "kind": "dataset",
        "class_count": dataset.class_count,
        "domain_tag": dataset.domain_tag,
        "class_names": dataset.class_names,
        "manifest": dataset.manifest,
    }
    save_container(path, {"images": dataset.images, "labels": dataset.labels}, header)
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)


def load_dataset(path) -> LabeledDataset:
    if not os.path.exists(path):
        raise MissingArtifactError(f"dataset file not found: {path}")
    arrays, header = load_container(path)
    return LabeledDataset(
        images=arrays["images"].astype(np.float32),
        labels=arrays["labels"].astype(np.int64),
        class_count=int(header["class_count"]),
        domain_tag=header["domain_tag"],
        manifest=header.get("manifest", {}),
        class_names=list(header.get("class_names", [])),
    )
