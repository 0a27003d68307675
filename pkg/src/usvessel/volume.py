"""Voxel volumes, MetaImage I/O and the preprocessing chain.

Volumes are stored as numpy arrays indexed ``[x, y, z]``. On disk the raw
data is written x-fastest, little-endian, next to a text header::

    ObjectType = Image
    NDims = 3
    DimSize = 205 160 102
    ElementSpacing = 1.0 1.0 1.0
    Offset = 0.0 0.0 0.0
    ElementType = MET_FLOAT
    ElementDataFile = vol.raw

Intensity volumes are float32 (``MET_FLOAT``); binary label volumes and
multi-code label maps are uint8 (``MET_UCHAR``).
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "VoxelVolume",
    "VolumeError",
    "DegenerateVolumeError",
    "KINDS",
    "read_volume",
    "write_volume",
    "read_image2d",
    "write_image2d",
    "resample",
    "resampled_dims",
    "round_half_up",
    "median_filter3",
    "mean_normalize",
    "pad",
    "crop",
    "preprocess",
    "atomic_write",
]

KINDS = ("intensity", "label", "labelmap")

_ELEMENT_TYPES = {"MET_FLOAT": np.dtype("<f4"), "MET_UCHAR": np.dtype("u1"), "MET_DOUBLE": np.dtype("<f8")}
_KNOWN_KEYS = (
    "ObjectType",
    "NDims",
    "BinaryData",
    "BinaryDataByteOrderMSB",
    "ElementByteOrderMSB",
    "DimSize",
    "ElementSpacing",
    "Offset",
    "ElementType",
    "ElementDataFile",
)


class VolumeError(ValueError):
    """Invalid volume, header or raw file."""


class DegenerateVolumeError(VolumeError):
    """Normalization of a zero-variance volume."""


@dataclass(frozen=True, eq=False)
class VoxelVolume:
    """Regular 3D grid of scalars with physical spacing and origin.

    ``origin`` is the world position (mm) of the center of voxel ``[0, 0, 0]``.
    ``extra`` holds header keys this package does not interpret; they are
    written back unchanged.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    kind: str = "intensity"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise VolumeError(f"unknown volume kind {self.kind!r}")
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"volume data must be a non-empty 3-d array, got shape {data.shape}")
        if self.kind == "intensity":
            if not np.isfinite(data).all():
                raise VolumeError("intensity volume contains non-finite values")
            data = data.astype(np.float32, copy=False)
        else:
            if not np.isfinite(data).all() or np.any(data != np.round(data)):
                raise VolumeError(f"{self.kind} volume must hold integer codes")
            top = 1 if self.kind == "label" else 255
            if data.size and (data.min() < 0 or data.max() > top):
                raise VolumeError(f"{self.kind} volume values must lie in [0, {top}]")
            data = data.astype(np.uint8, copy=False)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise VolumeError(f"spacing must be three positive finite values, got {self.spacing}")
        if len(origin) != 3 or not all(math.isfinite(o) for o in origin):
            raise VolumeError(f"origin must be three finite values, got {self.origin}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "extra", dict(self.extra))

    @property
    def dims(self):
        return tuple(self.data.shape)

    @property
    def is_label(self):
        return self.kind != "intensity"

    def with_data(self, data, kind=None):
        return replace(self, data=data, kind=kind or self.kind)

    def equals(self, other):
        """Bitwise equality of data and geometry."""
        return (
            self.kind == other.kind
            and self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
            and self.data.dtype == other.data.dtype
            and self.data.tobytes() == other.data.tobytes()
        )


# -- MetaImage I/O ------------------------------------------------------------


def _parse_header(text, path):
    header = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise VolumeError(f"{path}:{lineno}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    return header


def _floats(header, key, n, default=None):
    if key not in header:
        if default is None:
            raise VolumeError(f"header is missing {key}")
        return default
    try:
        values = tuple(float(v) for v in header[key].split())
    except ValueError as exc:
        raise VolumeError(f"malformed {key}: {header[key]!r}") from exc
    if len(values) != n:
        raise VolumeError(f"{key} must have {n} entries, got {len(values)}")
    return values


def _read_meta(path, ndims):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such volume header: {path}")
    raw = path.read_bytes()
    # the header ends at the ElementDataFile line; LOCAL data follows inline
    marker = raw.find(b"ElementDataFile")
    if marker < 0:
        raise VolumeError(f"{path}: header has no ElementDataFile")
    eol = raw.find(b"\n", marker)
    eol = len(raw) if eol < 0 else eol + 1
    try:
        header = _parse_header(raw[:eol].decode("ascii"), path)
    except UnicodeDecodeError as exc:
        raise VolumeError(f"{path}: header is not ASCII text") from exc
    if header.get("ObjectType", "Image") != "Image":
        raise VolumeError(f"{path}: ObjectType must be Image")
    if header.get("NDims") != str(ndims):
        raise VolumeError(f"{path}: expected NDims = {ndims}, got {header.get('NDims')}")
    if header.get("BinaryDataByteOrderMSB", "False").lower() == "true" or (
        header.get("ElementByteOrderMSB", "False").lower() == "true"
    ):
        raise VolumeError(f"{path}: big-endian data is not supported")
    try:
        dims = tuple(int(v) for v in header["DimSize"].split())
    except (KeyError, ValueError) as exc:
        raise VolumeError(f"{path}: missing or malformed DimSize") from exc
    if len(dims) != ndims or min(dims) < 1:
        raise VolumeError(f"{path}: DimSize must be {ndims} positive integers")
    spacing = _floats(header, "ElementSpacing", ndims, (1.0,) * ndims)
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise VolumeError(f"{path}: non-positive ElementSpacing {spacing}")
    origin = _floats(header, "Offset", ndims, (0.0,) * ndims)
    etype = header.get("ElementType")
    if etype not in _ELEMENT_TYPES:
        raise VolumeError(f"{path}: unsupported ElementType {etype!r}")
    dtype = _ELEMENT_TYPES[etype]

    datafile = header["ElementDataFile"]
    if datafile == "LOCAL":
        blob = raw[eol:]
    else:
        data_path = path.parent / datafile
        if not data_path.exists():
            raise FileNotFoundError(f"raw data file not found: {data_path}")
        blob = data_path.read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(blob) != expected:
        raise VolumeError(f"{path}: raw size mismatch, DimSize {dims} needs {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype=dtype).reshape(dims, order="F")
    extra = {k: v for k, v in header.items() if k not in _KNOWN_KEYS}
    return data, spacing, origin, etype, extra


def read_volume(path, kind=None):
    """Load a 3D MetaImage (``.mhd`` + raw, or ``.mha`` with LOCAL data).

    ``kind`` defaults to ``"label"`` for ``MET_UCHAR`` files and
    ``"intensity"`` otherwise.
    """
    data, spacing, origin, etype, extra = _read_meta(path, 3)
    if kind is None:
        kind = "label" if etype == "MET_UCHAR" else "intensity"
    if kind == "intensity" and etype == "MET_DOUBLE":
        data = data.astype(np.float32)
    return VoxelVolume(np.array(data, dtype=data.dtype.newbyteorder("=")), spacing, origin, kind, extra)


def _header_lines(ndims, dims, spacing, origin, etype, datafile, extra):
    lines = [
        "ObjectType = Image",
        f"NDims = {ndims}",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"DimSize = {' '.join(str(int(d)) for d in dims)}",
        f"ElementSpacing = {' '.join(repr(float(s)) for s in spacing)}",
        f"Offset = {' '.join(repr(float(o)) for o in origin)}",
    ]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    lines += [f"ElementType = {etype}", f"ElementDataFile = {datafile}"]
    return "\n".join(lines) + "\n"


def atomic_write(path, blob):
    """Write bytes or text to ``path`` through a temp file and rename."""
    path = Path(path)
    if isinstance(blob, str):
        blob = blob.encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_meta(path, data, spacing, origin, extra):
    path = Path(path)
    if data.dtype == np.uint8:
        etype = "MET_UCHAR"
    else:
        if not np.isfinite(data).all():
            raise VolumeError("refusing to write non-finite voxel values")
        etype = "MET_FLOAT"
        data = data.astype("<f4", copy=False)
    blob = np.asarray(data).ravel(order="F").tobytes()
    if path.suffix.lower() == ".mha":
        header = _header_lines(data.ndim, data.shape, spacing, origin, etype, "LOCAL", extra)
        atomic_write(path, header.encode("ascii") + blob)
        return
    raw_path = path.with_suffix(".raw")
    atomic_write(raw_path, blob)
    header = _header_lines(data.ndim, data.shape, spacing, origin, etype, raw_path.name, extra)
    atomic_write(path, header.encode("ascii"))


def write_volume(vol, path):
    """Write ``vol`` as ``path`` (header) plus a sibling ``.raw`` file.

    A ``.mha`` suffix stores the data inline instead. Missing parent
    directories are created.
    """
    if vol.kind == "intensity" and not np.isfinite(vol.data).all():
        raise VolumeError("refusing to write non-finite voxel values")
    _write_meta(path, vol.data, vol.spacing, vol.origin, vol.extra)


def read_image2d(path):
    """Load a 2D MetaImage; returns ``(pixels[u, v], spacing, origin)``."""
    data, spacing, origin, _, _ = _read_meta(path, 2)
    return np.array(data, dtype=np.float32), spacing, origin


def write_image2d(pixels, path, spacing=(1.0, 1.0), origin=(0.0, 0.0)):
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.ndim != 2:
        raise VolumeError("2D image must be a 2-d array")
    _write_meta(path, pixels, spacing, origin, {})


# -- preprocessing ------------------------------------------------------------


def round_half_up(x):
    return int(math.floor(x + 0.5))


def resampled_dims(dims, factor):
    return tuple(max(1, round_half_up(d * factor)) for d in dims)


def resample(vol, factor):
    """Rescale the grid by ``factor`` in (0, 1], keeping the physical extent.

    Intensity volumes are interpolated trilinearly; labels use nearest
    neighbour so they stay binary.
    """
    if not 0.0 < factor <= 1.0:
        raise VolumeError(f"resample factor must lie in (0, 1], got {factor}")
    old = vol.dims
    new = resampled_dims(old, factor)
    if new == old:
        return vol
    ratio = [o / n for o, n in zip(old, new)]
    axes = [(np.arange(n) + 0.5) * r - 0.5 for n, r in zip(new, ratio)]
    order = 0 if vol.is_label else 1
    # separable sampling: interpolate one axis at a time
    data = vol.data.astype(np.float64) if order else vol.data
    for axis, coords in enumerate(axes):
        if order == 0:
            idx = np.clip(np.floor(coords + 0.5).astype(int), 0, old[axis] - 1)
            data = np.take(data, idx, axis=axis)
        else:
            c = np.clip(coords, 0, old[axis] - 1)
            lo = np.floor(c).astype(int)
            hi = np.minimum(lo + 1, old[axis] - 1)
            w = (c - lo).reshape([-1 if a == axis else 1 for a in range(3)])
            lower = np.take(data, lo, axis=axis)
            data = lower + w * (np.take(data, hi, axis=axis) - lower)
    spacing = tuple(s * r for s, r in zip(vol.spacing, ratio))
    origin = tuple(o + (0.5 * r - 0.5) * s for o, r, s in zip(vol.origin, ratio, vol.spacing))
    return VoxelVolume(data, spacing, origin, vol.kind, vol.extra)


def median_filter3(vol):
    """3x3x3 median with edge replication."""
    if vol.is_label:
        raise VolumeError("median_filter3 applies to intensity volumes only")
    return vol.with_data(ndimage.median_filter(vol.data, size=3, mode="nearest"))


def mean_normalize(vol, scale=True):
    """Zero-mean, unit-variance intensities (``scale=False``: mean removal only)."""
    if vol.is_label:
        raise VolumeError("mean_normalize applies to intensity volumes only")
    data = vol.data.astype(np.float64)
    mean = data.mean()
    centered = data - mean
    if not scale:
        return vol.with_data(centered)
    sd = np.sqrt(np.mean(centered**2))
    if not sd > 0 or sd < 1e-12 * max(1.0, abs(mean)):
        raise DegenerateVolumeError("cannot normalize a zero-variance volume")
    return vol.with_data(centered / sd)


def pad(vol, margin):
    """Add ``margin`` zero voxels on every face."""
    margin = int(margin)
    if margin < 0:
        raise VolumeError("pad margin must be non-negative")
    if margin == 0:
        return vol
    data = np.pad(vol.data, margin, mode="constant", constant_values=0)
    origin = tuple(o - margin * s for o, s in zip(vol.origin, vol.spacing))
    return VoxelVolume(data, vol.spacing, origin, vol.kind, vol.extra)


def crop(vol, margin):
    """Remove ``margin`` voxels from every face (inverse of :func:`pad`)."""
    margin = int(margin)
    if margin < 0 or any(d <= 2 * margin for d in vol.dims):
        raise VolumeError(f"cannot crop {margin} voxels per face from dims {vol.dims}")
    if margin == 0:
        return vol
    sl = slice(margin, -margin)
    origin = tuple(o + margin * s for o, s in zip(vol.origin, vol.spacing))
    return VoxelVolume(vol.data[sl, sl, sl].copy(), vol.spacing, origin, vol.kind, vol.extra)


def preprocess(vol, factor=0.4, median=True, normalize=True, scale=True, margin=32):
    """Resample, median filter, normalize and pad, in that order.

    Label volumes skip the filter and normalization.
    """
    vol = resample(vol, factor)
    if not vol.is_label:
        if median:
            vol = median_filter3(vol)
        if normalize:
            vol = mean_normalize(vol, scale=scale)
    return pad(vol, margin)
