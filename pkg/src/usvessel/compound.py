"""Freehand compounding of tracked 2D frames into a voxel volume.

Each frame pixel ``pixels[u, v]`` sits at frame coordinates
``(u * su, v * sv, 0)`` mm; the frame pose maps those to world coordinates.
Pixel centers are binned to their nearest voxel and averaged, then gaps are
filled from covered neighbours.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import VolumeError, VoxelVolume, atomic_write, read_image2d, write_image2d

__all__ = [
    "TrackedFrame",
    "CompoundConfig",
    "FrameIndexError",
    "fit_bounds",
    "compound",
    "fill_holes",
    "read_frame_stream",
    "write_frame_stream",
    "pose_from_rotation",
    "filled_region",
    "sample_world",
    "frames_from_volume",
    "normalized_cross_correlation",
    "reference_ncc",
    "rotational_sweep",
    "INDEX_NAME",
]

INDEX_NAME = "index.txt"
_POSE_TOL = 1e-6


class FrameIndexError(FileNotFoundError):
    pass


@dataclass(frozen=True, eq=False)
class TrackedFrame:
    pixels: np.ndarray
    pixel_spacing: tuple
    pose: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim != 2 or min(pixels.shape) < 1:
            raise ValueError(f"frame pixels must be a non-empty 2-d array, got {pixels.shape}")
        if not np.isfinite(pixels).all():
            raise ValueError("frame pixels must be finite")
        spacing = tuple(float(s) for s in self.pixel_spacing)
        if len(spacing) != 2 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"pixel spacing must be two positive values, got {self.pixel_spacing}")
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4) or not np.isfinite(pose).all():
            raise ValueError("pose must be a finite 4x4 matrix")
        rot = pose[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=_POSE_TOL, rtol=0):
            raise ValueError("pose rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > _POSE_TOL:
            raise ValueError("pose rotation must have determinant +1")
        if not np.allclose(pose[3], [0, 0, 0, 1]):
            raise ValueError("pose bottom row must be [0, 0, 0, 1]")
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "pixel_spacing", spacing)
        object.__setattr__(self, "pose", pose)

    def pixel_centers(self):
        """World coordinates of every pixel center, shape ``(h*w, 3)``."""
        nu, nv = self.pixels.shape
        su, sv = self.pixel_spacing
        u, v = np.meshgrid(np.arange(nu) * su, np.arange(nv) * sv, indexing="ij")
        local = np.stack([u.ravel(), v.ravel(), np.zeros(u.size)], axis=1)
        return local @ self.pose[:3, :3].T + self.pose[:3, 3]

    def corner_centers(self):
        nu, nv = self.pixels.shape
        su, sv = self.pixel_spacing
        local = np.array([[u * su, v * sv, 0.0] for u in (0, nu - 1) for v in (0, nv - 1)])
        return local @ self.pose[:3, :3].T + self.pose[:3, 3]


@dataclass(frozen=True)
class CompoundConfig:
    """``bounds`` is ``None`` (fit to the frames) or ``(origin, dims)``."""

    voxel_spacing: float = 1.0
    hole_fill_radius: int = 1
    hole_fill_passes: int = 10
    bounds: tuple | None = None

    def __post_init__(self):
        if not (math.isfinite(self.voxel_spacing) and self.voxel_spacing > 0):
            raise ValueError("voxel_spacing must be positive")
        if self.hole_fill_radius < 0 or self.hole_fill_passes < 0:
            raise ValueError("hole filling radius and passes must be non-negative")


def pose_from_rotation(rotation, translation=(0.0, 0.0, 0.0)):
    pose = np.eye(4)
    pose[:3, :3] = rotation
    pose[:3, 3] = translation
    return pose


def fit_bounds(frames, voxel_spacing):
    """Axis-aligned grid ``(origin, dims)`` holding every pixel center."""
    frames = list(frames)
    if not frames:
        raise ValueError("cannot fit bounds to an empty frame sequence")
    pts = np.concatenate([f.corner_centers() for f in frames])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    dims = tuple(int(math.ceil((h - l) / voxel_spacing - 1e-9)) + 1 for l, h in zip(lo, hi))
    return tuple(float(v) for v in lo), dims


def _chebyshev_sums(arr, radius):
    padded = np.pad(arr, radius)
    out = np.zeros_like(arr)
    nx, ny, nz = arr.shape
    span = range(2 * radius + 1)
    for i in span:
        for j in span:
            for k in span:
                out += padded[i:i + nx, j:j + ny, k:k + nz]
    return out


def _fill_pass(values, covered, radius):
    sums = _chebyshev_sums(np.where(covered, values, 0.0), radius)
    counts = _chebyshev_sums(covered.astype(np.float64), radius)
    holes = ~covered & (counts > 0)
    filled = values.copy()
    filled[holes] = sums[holes] / counts[holes]
    return filled, covered | holes


def fill_holes(vol, coverage, radius=1, passes=1):
    """Fill uncovered voxels with the mean of covered Chebyshev neighbours.

    Each pass uses only voxels covered before that pass; voxels filled in one
    pass count as covered in the next. Covered voxels are never modified.
    """
    if vol.dims != coverage.dims:
        raise VolumeError(f"dims mismatch: volume {vol.dims} vs coverage {coverage.dims}")
    values = vol.data.astype(np.float64)
    covered = coverage.data.astype(bool)
    if radius > 0:
        for _ in range(passes):
            values, now = _fill_pass(values, covered, radius)
            if now.sum() == covered.sum():
                break
            covered = now
    return vol.with_data(np.where(covered, values, 0.0))


def compound(frames, cfg=CompoundConfig()):
    """Forward-map frames into a volume; returns ``(volume, coverage)``.

    Voxel values are the mean of contributing pixels, summed in a canonical
    order so the result does not depend on frame order. ``coverage`` marks
    voxels hit by at least one pixel (before hole filling).
    """
    frames = list(frames)
    if not frames:
        raise ValueError("compound needs at least one frame")
    vs = float(cfg.voxel_spacing)
    if cfg.bounds is None:
        origin, dims = fit_bounds(frames, vs)
    else:
        origin, dims = tuple(float(o) for o in cfg.bounds[0]), tuple(int(d) for d in cfg.bounds[1])
    origin_arr = np.asarray(origin)
    n_vox = int(np.prod(dims))

    flat_idx, vals = [], []
    for f in frames:
        idx = np.floor((f.pixel_centers() - origin_arr) / vs + 0.5).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
        idx = idx[inside]
        flat_idx.append(np.ravel_multi_index(idx.T, dims))
        vals.append(f.pixels.ravel()[inside].astype(np.float64))
    flat_idx = np.concatenate(flat_idx)
    vals = np.concatenate(vals)

    extra = {}
    if flat_idx.size == 0:
        warnings.warn("no frame pixel falls inside the requested bounds", RuntimeWarning, stacklevel=2)
        extra["CompoundWarning"] = "no pixels inside bounds"
    order = np.lexsort((vals, flat_idx))
    flat_idx, vals = flat_idx[order], vals[order]
    sums = np.bincount(flat_idx, weights=vals, minlength=n_vox)
    counts = np.bincount(flat_idx, minlength=n_vox)
    hit = counts > 0
    mean = np.zeros(n_vox)
    mean[hit] = sums[hit] / counts[hit]

    spacing = (vs, vs, vs)
    volume = VoxelVolume(mean.reshape(dims), spacing, origin, "intensity", extra)
    coverage = VoxelVolume(hit.reshape(dims).astype(np.uint8), spacing, origin, "label")
    if cfg.hole_fill_radius > 0 and cfg.hole_fill_passes > 0:
        volume = fill_holes(volume, coverage, cfg.hole_fill_radius, cfg.hole_fill_passes)
    return volume, coverage


# -- frame-stream files -------------------------------------------------------


def write_frame_stream(frames, directory):
    """Write frames as 2D MetaImages plus an ``index.txt`` listing.

    Index lines: ``filename  p00 p01 ... p33  su sv``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# filename pose[16 row-major] su sv"]
    for i, f in enumerate(frames):
        name = f"frame_{i:05d}.mhd"
        write_image2d(f.pixels, directory / name, f.pixel_spacing)
        pose = " ".join(repr(float(v)) for v in f.pose.ravel())
        lines.append(f"{name} {pose} {f.pixel_spacing[0]!r} {f.pixel_spacing[1]!r}")
    atomic_write(directory / INDEX_NAME, "\n".join(lines) + "\n")


def read_frame_stream(directory):
    directory = Path(directory)
    index = directory / INDEX_NAME
    if not index.exists():
        raise FrameIndexError("frame index not found")
    frames = []
    for lineno, line in enumerate(index.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 19:
            raise ValueError(f"{index}:{lineno}: expected 19 fields, got {len(parts)}")
        pixels, _, _ = read_image2d(directory / parts[0])
        pose = np.array([float(v) for v in parts[1:17]]).reshape(4, 4)
        frames.append(TrackedFrame(pixels, (float(parts[17]), float(parts[18])), pose))
    return frames


# -- helpers for synthetic sweeps and reconstruction checks --------------------


def filled_region(coverage, radius=1, passes=10):
    """Voxels holding data after :func:`fill_holes` with these settings."""
    mask = coverage.data.astype(bool)
    if radius > 0 and passes > 0:
        mask = ndimage.binary_dilation(mask, np.ones((2 * radius + 1,) * 3, bool), iterations=passes)
    return mask


def sample_world(reference, points):
    """Trilinear samples of ``reference`` at world points ``(n, 3)``; 0 outside."""
    idx = (np.asarray(points) - np.asarray(reference.origin)) / np.asarray(reference.spacing)
    return ndimage.map_coordinates(reference.data.astype(np.float64), idx.T, order=1, mode="constant", cval=0.0)


def frames_from_volume(reference, poses, frame_shape, pixel_spacing):
    """Slice ``reference`` along each pose into tracked frames."""
    frames = []
    for pose in poses:
        blank = TrackedFrame(np.zeros(frame_shape), pixel_spacing, pose)
        pixels = sample_world(reference, blank.pixel_centers()).reshape(frame_shape)
        frames.append(TrackedFrame(pixels, pixel_spacing, pose))
    return frames


def rotational_sweep(reference, step_deg=1.0, span_deg=180.0):
    """Frames from a probe rotating about the y axis through the volume centre.

    Each frame is wide enough to cross the whole xz diagonal and spans the
    full y extent, so the fan of planes covers the volume. Returns
    ``(frames, bounds)`` where ``bounds`` is the reference grid minus a
    one-voxel rim, the region the sweep samples without extrapolating.
    """
    if step_deg <= 0:
        raise ValueError("step_deg must be positive")
    dims = np.asarray(reference.dims)
    spacing = float(min(reference.spacing))
    centre = np.asarray(reference.origin) + (dims - 1) / 2 * np.asarray(reference.spacing)
    extent = (dims - 1) * np.asarray(reference.spacing)
    nu = int(math.ceil(math.hypot(extent[0], extent[2]) / spacing)) + 3
    nv = int(math.ceil(extent[1] / spacing)) + 1
    half = np.array([(nu - 1) / 2 * spacing, (nv - 1) / 2 * spacing, 0.0])
    poses = []
    for deg in np.arange(0.0, span_deg, step_deg):
        rot = _rotation_y(math.radians(deg))
        poses.append(pose_from_rotation(rot, centre - rot @ half))
    frames = frames_from_volume(reference, poses, (nu, nv), (spacing, spacing))
    origin = tuple(float(o + s) for o, s in zip(reference.origin, reference.spacing))
    bounds = (origin, tuple(int(d) - 2 for d in dims))
    return frames, bounds


def _rotation_y(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def voxel_centers(vol):
    grid = np.indices(vol.dims).reshape(3, -1).T.astype(np.float64)
    return grid * np.asarray(vol.spacing) + np.asarray(vol.origin)


def normalized_cross_correlation(a, b):
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 0 else 0.0


def reference_ncc(vol, coverage, reference, radius=1, passes=10):
    """NCC between a reconstruction and the reference it was sliced from.

    Only voxels inside the hole-filled coverage region are compared.
    """
    region = filled_region(coverage, radius, passes).ravel()
    truth = sample_world(reference, voxel_centers(vol)[region])
    return normalized_cross_correlation(vol.data.ravel()[region], truth)
