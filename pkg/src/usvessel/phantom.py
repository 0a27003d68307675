"""Synthetic liver-vessel phantoms with multiplicative speckle.

A phantom is a random branching tree of straight tube segments. The label
marks voxels within ``radius`` of a segment centerline; the image is bright
parenchyma (1.0) with darker vessels (``vessel_contrast``), multiplied by
``max(0, 1 + N(0, speckle_sd))``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .volume import VoxelVolume, atomic_write, write_volume

__all__ = [
    "PhantomConfig",
    "Segment",
    "PhantomError",
    "generate",
    "random_tree",
    "rasterize",
    "render_image",
    "write_phantoms",
    "MIN_FOREGROUND",
    "MAX_FOREGROUND",
]

MIN_FOREGROUND = 0.005
MAX_FOREGROUND = 0.15
MAX_ANGLE_JITTER_DEG = 40.0
RADIUS_DECAY = 0.8
MAX_TRIES = 10


class PhantomError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (96, 96, 96)
    n_branches: int = 6
    radius_range: tuple = (2.0, 6.0)
    vessel_contrast: float = 0.35
    speckle_sd: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "radius_range", tuple(float(r) for r in self.radius_range))
        lo, hi = self.radius_range
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ValueError(f"dims must be three sizes >= 4, got {self.dims}")
        if not (1.0 <= lo <= hi < min(self.dims) / 4):
            raise ValueError(f"radius_range {self.radius_range} must satisfy 1 <= lo <= hi < min(dims)/4")
        if not 0 < self.vessel_contrast < 1:
            raise ValueError("vessel_contrast must lie in (0, 1)")
        if self.speckle_sd < 0:
            raise ValueError("speckle_sd must be non-negative")
        if self.n_branches < 1:
            raise ValueError("n_branches must be >= 1")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class Segment:
    start: tuple
    end: tuple
    radius: float


def _unit(v):
    return v / np.linalg.norm(v)


def _jitter(direction, rng):
    """Rotate ``direction`` by a random angle up to the jitter limit."""
    perp = _unit(np.cross(direction, rng.normal(size=3)))
    angle = np.deg2rad(rng.uniform(10.0, MAX_ANGLE_JITTER_DEG))
    return _unit(np.cos(angle) * direction + np.sin(angle) * perp)


def random_tree(cfg, rng):
    """Breadth-first binary branching tree of ``n_branches`` segments."""
    dims = np.asarray(cfg.dims, dtype=float)
    lo_r, hi_r = cfg.radius_range

    def clip(p, r):
        margin = np.minimum(r + 1.0, dims / 2 - 1)
        return np.clip(p, margin, dims - 1 - margin)

    # the trunk is drawn from the upper half of the radius range
    radius = rng.uniform(0.5 * (lo_r + hi_r), hi_r)
    start = clip(dims / 2 + rng.uniform(-0.25, 0.25, 3) * dims, radius)
    direction = _unit(rng.normal(size=3))
    queue = [(start, direction, radius)]
    segments = []
    while queue and len(segments) < cfg.n_branches:
        start, direction, radius = queue.pop(0)
        length = rng.uniform(0.4, 0.8) * dims.min()
        end = clip(start + length * direction, radius)
        if np.linalg.norm(end - start) < 1.0:
            end = clip(start - length * direction, radius)
            direction = -direction
        segments.append(Segment(tuple(start), tuple(end), float(radius)))
        child_r = max(lo_r, RADIUS_DECAY * radius)
        for _ in range(2):
            queue.append((end, _jitter(direction, rng), child_r))
    return segments


def _segment_distance(points, a, b):
    ab = b - a
    denom = float(ab @ ab)
    rel = points - a
    t = np.zeros(points.shape[:-1]) if denom == 0 else np.clip(rel @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(rel - t[..., None] * ab, axis=-1)


def rasterize(segments, dims):
    """Binary mask of voxel centers within ``radius`` of any segment."""
    mask = np.zeros(dims, dtype=bool)
    for seg in segments:
        a, b, r = np.asarray(seg.start), np.asarray(seg.end), seg.radius
        lo = np.maximum(np.floor(np.minimum(a, b) - r).astype(int), 0)
        hi = np.minimum(np.ceil(np.maximum(a, b) + r).astype(int) + 1, dims)
        if np.any(hi <= lo):
            continue
        grid = np.stack(
            np.meshgrid(*(np.arange(l, h) for l, h in zip(lo, hi)), indexing="ij"), axis=-1
        ).astype(float)
        inside = _segment_distance(grid, a, b) <= r
        mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= inside
    return mask


def render_image(mask, cfg, rng):
    base = np.where(mask, cfg.vessel_contrast, 1.0)
    if cfg.speckle_sd > 0:
        base = base * np.maximum(0.0, 1.0 + rng.normal(0.0, cfg.speckle_sd, size=mask.shape))
    return base


def generate(cfg):
    """Return ``(image, label)`` volumes for ``cfg``; pure in ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    for _ in range(MAX_TRIES):
        segments = random_tree(cfg, rng)
        mask = rasterize(segments, cfg.dims)
        frac = mask.mean()
        if MIN_FOREGROUND <= frac <= MAX_FOREGROUND:
            image = render_image(mask, cfg, rng)
            return (
                VoxelVolume(image, kind="intensity"),
                VoxelVolume(mask.astype(np.uint8), kind="label"),
            )
    raise PhantomError(
        f"no tree with foreground fraction in [{MIN_FOREGROUND}, {MAX_FOREGROUND}] after {MAX_TRIES} tries"
    )


def write_phantoms(n, out_dir, cfg, splits=None, transform=None):
    """Write ``n`` phantoms (seeds ``cfg.seed + i``) and a ``manifest.json``.

    ``splits`` is an optional list of split tags, one per phantom; it
    defaults to all ``"train"``. ``transform(image, label)`` may preprocess
    each pair before it is written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = list(splits) if splits is not None else ["train"] * n
    if len(splits) != n:
        raise ValueError("need one split tag per phantom")
    entries = []
    for i in range(n):
        pc = PhantomConfig(**{**asdict(cfg), "seed": cfg.seed + i})
        image, label = generate(pc)
        if transform is not None:
            image, label = transform(image, label)
        img_name, lab_name = f"phantom_{i:03d}_image.mhd", f"phantom_{i:03d}_label.mhd"
        write_volume(image, out_dir / img_name)
        write_volume(label, out_dir / lab_name)
        entries.append({"id": f"phantom_{i:03d}", "image": img_name, "label": lab_name, "split": splits[i]})
    manifest = {"volumes": entries}
    atomic_write(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out_dir / "manifest.json"
