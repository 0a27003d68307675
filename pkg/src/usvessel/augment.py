"""Patch sampling and geometric augmentation (rotation, scaling, elastic).

All randomness comes from a ``numpy.random.Generator`` passed in by the
caller. Image and label of a pair always share one transform and one field.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .volume import VolumeError, VoxelVolume

__all__ = [
    "AugmentConfig",
    "AffineTransform",
    "DisplacementField",
    "Patch",
    "random_affine",
    "elastic_field",
    "warp",
    "sample_patches",
    "augment_pair",
    "volume_rng",
]


@dataclass(frozen=True)
class AugmentConfig:
    rot_deg: float = 10.0
    scale_frac: float = 0.10
    elastic_sd: float = 1.0
    elastic_grid_spacing: int = 32
    patch_size: tuple = (152, 152, 96)
    patches_per_volume: int = 20
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        if self.rot_deg < 0:
            raise ValueError("rot_deg must be non-negative")
        if not abs(self.scale_frac) < 1:
            raise ValueError("scale_frac must satisfy |scale_frac| < 1")
        if self.elastic_sd < 0:
            raise ValueError("elastic_sd must be non-negative")
        if self.elastic_grid_spacing < 1:
            raise ValueError("elastic_grid_spacing must be >= 1")
        if len(self.patch_size) != 3 or any(p < 8 or p % 8 for p in self.patch_size):
            raise ValueError(f"patch_size {self.patch_size} must be three multiples of 8")
        if self.patches_per_volume < 1:
            raise ValueError("patches_per_volume must be >= 1")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """Maps input point ``p`` to output ``matrix @ (p - center) + center``.

    ``center`` is given in output voxel coordinates of the warped grid.
    """

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    center: tuple = (0.0, 0.0, 0.0)
    angles_deg: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def with_center(self, center):
        return AffineTransform(self.matrix, tuple(float(c) for c in center), self.angles_deg, self.scale)

    def is_identity(self):
        return np.array_equal(self.matrix, np.eye(3))

    def digest(self):
        h = hashlib.sha256(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())
        h.update(np.asarray(self.center, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Dense displacement in voxels, shape ``(3, nx, ny, nz)``."""

    dense: np.ndarray
    control: np.ndarray
    grid_spacing: int

    @property
    def dims(self):
        return tuple(self.dense.shape[1:])

    @classmethod
    def zeros(cls, dims, grid_spacing=32):
        ctrl = tuple(-(-(d - 1) // grid_spacing) + 1 for d in dims)
        return cls(np.zeros((3,) + tuple(dims)), np.zeros((3,) + ctrl), grid_spacing)

    def digest(self):
        return hashlib.sha256(np.ascontiguousarray(self.control, dtype="<f8").tobytes()).hexdigest()


def volume_rng(seed, *keys):
    """Independent generator for a ``(seed, key...)`` stream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]))


def random_affine(cfg, rng):
    """Per-axis rotation in ``[-rot_deg, rot_deg]`` and isotropic scale in ``1 +/- scale_frac``."""
    angles = rng.uniform(-cfg.rot_deg, cfg.rot_deg, size=3)
    s = rng.uniform(1 - abs(cfg.scale_frac), 1 + abs(cfg.scale_frac))
    if cfg.rot_deg == 0 and cfg.scale_frac == 0:
        return AffineTransform()
    rot = Rotation.from_euler("xyz", angles, degrees=True).as_matrix()
    return AffineTransform(s * rot, (0.0, 0.0, 0.0), tuple(float(a) for a in angles), float(s))


def _interp_axis(ctrl, coords, axis):
    """Linear interpolation of ``ctrl`` along ``axis`` at fractional positions."""
    n = ctrl.shape[axis]
    lo = np.clip(np.floor(coords).astype(int), 0, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    w = (coords - lo).reshape([-1 if a == axis else 1 for a in range(ctrl.ndim)])
    lower = np.take(ctrl, lo, axis=axis)
    return lower + w * (np.take(ctrl, hi, axis=axis) - lower)


def elastic_field(dims, cfg, rng):
    """Gaussian control displacements on a coarse grid, trilinearly upsampled."""
    dims = tuple(int(d) for d in dims)
    g = int(cfg.elastic_grid_spacing)
    ctrl_dims = tuple(-(-(d - 1) // g) + 1 for d in dims)
    control = rng.normal(0.0, cfg.elastic_sd, size=(3,) + ctrl_dims) if cfg.elastic_sd > 0 else np.zeros(
        (3,) + ctrl_dims
    )
    dense = control
    for axis, d in enumerate(dims):
        dense = _interp_axis(dense, np.arange(d) / g, axis + 1)
    return DisplacementField(np.ascontiguousarray(dense), control, g)


def _sample(data, coords, nearest):
    if nearest:
        idx = np.floor(coords + 0.5).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(data.shape).reshape(3, 1, 1, 1)), axis=0)
        out = np.zeros(coords.shape[1:], dtype=data.dtype)
        sel = tuple(i[inside] for i in idx)
        out[inside] = data[sel]
        return out
    return ndimage.map_coordinates(data, coords, order=1, mode="constant", cval=0.0, prefilter=False)


def warp(vol, transform, field=None):
    """Backward warp: output voxel ``q`` samples ``A^-1 (q - c) + c + d(q)``.

    Trilinear for intensity, nearest neighbour for labels; samples outside
    the input are 0.
    """
    dims = vol.dims
    if field is None:
        field = DisplacementField.zeros(dims)
    if field.dims != dims:
        raise VolumeError(f"displacement field dims {field.dims} do not match volume {dims}")
    if transform.is_identity() and not field.dense.any():
        return vol
    grid = np.indices(dims, dtype=np.float64)
    c = np.asarray(transform.center, dtype=np.float64).reshape(3, 1, 1, 1)
    inv = np.linalg.inv(transform.matrix)
    coords = np.einsum("ij,jxyz->ixyz", inv, grid - c) + c + field.dense
    data = vol.data if vol.is_label else vol.data.astype(np.float64)
    return vol.with_data(_sample(data, coords, nearest=vol.is_label))


@dataclass(frozen=True, eq=False)
class Patch:
    image: VoxelVolume
    label: VoxelVolume
    origin: tuple
    geometry: str = ""

    def __iter__(self):
        return iter((self.image, self.label))


def _crop(vol, origin, size):
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    new_origin = tuple(o + i * sp for o, i, sp in zip(vol.origin, origin, vol.spacing))
    return VoxelVolume(vol.data[sl].copy(), vol.spacing, new_origin, vol.kind)


def sample_patches(image, label, cfg, rng):
    """Crop ``patches_per_volume`` aligned (image, label) patches.

    Origins are uniform over all positions where the patch fits. Each item
    unpacks as ``(image_patch, label_patch)``.
    """
    if image.dims != label.dims:
        raise VolumeError(f"image {image.dims} and label {label.dims} dims differ")
    size = cfg.patch_size
    if any(d < p for d, p in zip(image.dims, size)):
        raise VolumeError(f"volume {image.dims} is smaller than patch size {size}")
    patches = []
    for _ in range(cfg.patches_per_volume):
        origin = tuple(int(rng.integers(0, d - p + 1)) for d, p in zip(image.dims, size))
        patches.append(Patch(_crop(image, origin, size), _crop(label, origin, size), origin))
    return patches


def augment_pair(image, label, cfg, rng):
    """Warp an (image, label) patch pair with one shared random geometry."""
    if image.dims != label.dims:
        raise VolumeError("image and label dims differ")
    center = tuple((d - 1) / 2.0 for d in image.dims)
    transform = random_affine(cfg, rng).with_center(center)
    fld = elastic_field(image.dims, cfg, rng)
    geometry = hashlib.sha256((transform.digest() + fld.digest()).encode()).hexdigest()
    return warp(image, transform, fld), warp(label, transform, fld), geometry
