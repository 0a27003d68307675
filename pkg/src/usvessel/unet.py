"""Reduced-filter 3D U-Net: parameters, forward pass, tiled inference, storage.

The channel plan follows the classic 3D U-Net (two 3x3x3 convolutions per
level, channel doubling, three 2x2x2 poolings) with every filter count divided
by ``filter_divisor``. Each convolution is followed by instance normalization
and ReLU; the head is a 1x1x1 convolution with a sigmoid.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .volume import VoxelVolume, atomic_write

__all__ = [
    "UNetConfig",
    "UNetParams",
    "ParamFileError",
    "channel_plan",
    "build",
    "forward",
    "predict",
    "infer_volume",
    "tile_starts",
    "save_params",
    "load_params",
]

ORIGINAL_BASE_FILTERS = 32
_MAGIC = b"USVUNET\x01"


class ParamFileError(ValueError):
    """Corrupt, truncated or incompatible parameter file."""


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    filter_divisor: int = 8
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.filter_divisor < 1 or ORIGINAL_BASE_FILTERS % self.filter_divisor:
            raise ValueError(
                f"filter_divisor {self.filter_divisor} must divide the original {ORIGINAL_BASE_FILTERS} filters"
            )
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def base_filters(self):
        return ORIGINAL_BASE_FILTERS // self.filter_divisor

    @property
    def size_multiple(self):
        return 2**self.levels

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        base = d.pop("base_filters", None)
        cfg = cls(**d)
        if base is not None and base != cfg.base_filters:
            raise ValueError(f"base_filters {base} inconsistent with filter_divisor {cfg.filter_divisor}")
        return cfg

    def to_dict(self):
        d = asdict(self)
        d["base_filters"] = self.base_filters
        return d


def channel_plan(cfg):
    """Ordered ``(name, shape)`` pairs for every parameter tensor."""
    f = cfg.base_filters
    plan = []

    def double_conv(prefix, cin, cmid, cout):
        for i, (a, b) in enumerate(((cin, cmid), (cmid, cout)), start=1):
            plan.append((f"{prefix}.conv{i}.weight", (b, a, 3, 3, 3)))
            plan.append((f"{prefix}.conv{i}.bias", (b,)))
            plan.append((f"{prefix}.norm{i}.gain", (b,)))
            plan.append((f"{prefix}.norm{i}.bias", (b,)))

    cin = cfg.in_channels
    for level in range(1, cfg.levels + 1):
        width = f * 2 ** (level - 1)
        double_conv(f"enc{level}", cin, width, 2 * width)
        cin = 2 * width
    double_conv("bottom", cin, cin, 2 * cin)
    below = 2 * cin
    for level in range(cfg.levels, 0, -1):
        width = f * 2**level
        plan.append((f"dec{level}.up.weight", (below, below, 2, 2, 2)))
        double_conv(f"dec{level}", below + width, width, width)
        below = width
    plan.append(("head.weight", (cfg.out_channels, below)))
    plan.append(("head.bias", (cfg.out_channels,)))
    return plan


class UNetParams:
    """Named parameter tensors in canonical order, plus their config."""

    def __init__(self, config, tensors):
        self.config = config
        expected = channel_plan(config)
        names = [n for n, _ in expected]
        if list(tensors) != names:
            raise ParamFileError("parameter names do not match the channel plan")
        for name, shape in expected:
            if tuple(tensors[name].shape) != shape:
                raise ParamFileError(f"{name}: expected shape {shape}, got {tuple(tensors[name].shape)}")
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def count(self):
        return sum(t.value.size for t in self.tensors.values())

    def weight_tensors(self):
        """Convolution and upconvolution kernels (excludes biases and gains)."""
        return [t for n, t in self.tensors.items() if n.endswith(".weight")]

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self):
        return UNetParams(
            self.config,
            {n: ad.Tensor(t.value.copy(), requires_grad=t.requires_grad, name=n) for n, t in self.tensors.items()},
        )

    def equals(self, other):
        return (
            self.config == other.config
            and self.names() == other.names()
            and all(
                a.value.dtype == b.value.dtype and np.array_equal(a.value, b.value)
                for a, b in zip(self, other)
            )
        )


def build(cfg, seed, dtype=np.float32):
    """He-uniform kernels from ``seed``; zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in channel_plan(cfg):
        if name.endswith(".weight"):
            if name.startswith("head"):
                fan_in = shape[1]
            elif ".up." in name:
                fan_in = shape[0]
            else:
                fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            value = rng.uniform(-limit, limit, size=shape)
        elif name.endswith(".gain"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        tensors[name] = ad.Tensor(value.astype(dtype), requires_grad=True, name=name)
    return UNetParams(cfg, tensors)


def _conv_block(params, prefix, x):
    for i in (1, 2):
        x = ad.conv3d(x, params[f"{prefix}.conv{i}.weight"], params[f"{prefix}.conv{i}.bias"])
        x = ad.instance_norm(x, params[f"{prefix}.norm{i}.gain"], params[f"{prefix}.norm{i}.bias"])
        x = ad.relu(x)
    return x


def forward(params, patch):
    """Probabilities of shape ``(b, out_channels, x, y, z)``.

    ``patch`` is a Tensor or array of shape ``(b, in_channels, x, y, z)``
    with every spatial dim divisible by ``2**levels``.
    """
    cfg = params.config
    if not isinstance(patch, ad.Tensor):
        patch = ad.Tensor(np.asarray(patch, dtype=params["head.weight"].dtype))
    if patch.ndim != 5 or patch.shape[1] != cfg.in_channels:
        raise ValueError(f"expected input (b, {cfg.in_channels}, x, y, z), got {patch.shape}")
    k = cfg.size_multiple
    if any(s % k for s in patch.shape[2:]):
        raise ValueError(f"spatial dims {patch.shape[2:]} must be divisible by {k}")

    skips = []
    x = patch
    for level in range(1, cfg.levels + 1):
        x = _conv_block(params, f"enc{level}", x)
        skips.append(x)
        x, _ = ad.maxpool3d(x)
    x = _conv_block(params, "bottom", x)
    for level in range(cfg.levels, 0, -1):
        x = ad.upconv3d(x, params[f"dec{level}.up.weight"])
        x = ad.concat_channels(skips[level - 1], x)
        x = _conv_block(params, f"dec{level}", x)
    x = ad.pointwise_conv3d(x, params["head.weight"], params["head.bias"])
    return ad.sigmoid(x)


def predict(params, patch):
    """Forward pass without building a gradient graph."""
    frozen = UNetParams(
        params.config, {n: ad.Tensor(t.value, name=n) for n, t in params.items()}
    )
    return forward(frozen, patch).value


def tile_starts(n, tile, overlap):
    """Start offsets covering ``[0, n)`` with tiles of ``tile`` voxels."""
    if n <= tile:
        return [0]
    step = tile - overlap
    starts = list(range(0, n - tile + 1, step))
    if starts[-1] + tile < n:
        starts.append(n - tile)
    return starts


def infer_volume(params, vol, tile=(152, 152, 96), overlap=16, threshold=0.5, return_probability=False):
    """Sliding-window segmentation of a preprocessed intensity volume.

    Axes shorter than the tile are zero-padded up to the next multiple of
    ``2**levels`` and handled in one pass. Overlapping tile probabilities are
    averaged before thresholding; voxels with ``p >= threshold`` are
    foreground.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    k = params.config.size_multiple
    tile = tuple(int(t) for t in tile)
    if len(tile) != 3 or any(t <= 0 or t % k for t in tile):
        raise ValueError(f"tile {tile} must have three positive dims divisible by {k}")
    if overlap < 0 or any(overlap >= t for t in tile):
        raise ValueError("overlap must be non-negative and smaller than every tile dim")

    data = vol.data.astype(params["head.weight"].dtype)
    dims = data.shape
    eff_tile = tuple(t if n >= t else -(-n // k) * k for n, t in zip(dims, tile))
    padded_dims = tuple(max(n, t) for n, t in zip(dims, eff_tile))
    if padded_dims != dims:
        buf = np.zeros(padded_dims, dtype=data.dtype)
        buf[: dims[0], : dims[1], : dims[2]] = data
        data = buf

    prob_sum = np.zeros(padded_dims, dtype=np.float64)
    count = np.zeros(padded_dims, dtype=np.int32)
    starts = [tile_starts(n, t, overlap) for n, t in zip(padded_dims, eff_tile)]
    tx, ty, tz = eff_tile
    for sx in starts[0]:
        for sy in starts[1]:
            for sz in starts[2]:
                block = data[sx:sx + tx, sy:sy + ty, sz:sz + tz]
                prob = predict(params, block[None, None])[0, 0]
                prob_sum[sx:sx + tx, sy:sy + ty, sz:sz + tz] += prob
                count[sx:sx + tx, sy:sy + ty, sz:sz + tz] += 1
    prob = (prob_sum / count)[: dims[0], : dims[1], : dims[2]]
    label = VoxelVolume((prob >= threshold).astype(np.uint8), vol.spacing, vol.origin, kind="label")
    if return_probability:
        return label, prob
    return label


def save_params(params, path):
    """Binary parameter file: magic, JSON header, little-endian data, SHA-256."""
    header = {
        "version": 1,
        "config": params.config.to_dict(),
        "tensors": [
            {"name": n, "shape": list(t.shape), "dtype": t.value.dtype.newbyteorder("<").str}
            for n, t in params.items()
        ],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(t.value).astype(t.value.dtype.newbyteorder("<")).tobytes() for t in params)
    payload = _MAGIC + struct.pack("<Q", len(head)) + head + body
    digest = hashlib.sha256(payload).digest()
    atomic_write(path, payload + digest)


def load_params(path, config=None):
    """Read a file written by :func:`save_params`.

    When ``config`` is given, the stored plan must match it exactly.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_MAGIC) + 8 + 32:
        raise ParamFileError("checksum mismatch: file too short")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ParamFileError("checksum mismatch")
    if payload[: len(_MAGIC)] != _MAGIC:
        raise ParamFileError("not a parameter file")
    (hlen,) = struct.unpack("<Q", payload[len(_MAGIC): len(_MAGIC) + 8])
    start = len(_MAGIC) + 8
    header = json.loads(payload[start:start + hlen])
    stored = UNetConfig.from_dict(header["config"])
    if config is not None:
        expected = dict(channel_plan(config))
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            if expected.get(entry["name"]) != shape:
                raise ParamFileError(
                    f"shape mismatch for {entry['name']}: file has {shape}, config expects {expected.get(entry['name'])}"
                )
        if stored != config:
            raise ParamFileError(f"config mismatch: file has {stored}, expected {config}")
    offset = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(shape)), offset=offset).reshape(shape)
        offset += nbytes
        tensors[entry["name"]] = ad.Tensor(arr.astype(dt.newbyteorder("=")), requires_grad=True, name=entry["name"])
    if offset != len(payload):
        raise ParamFileError("trailing bytes after tensor data")
    return UNetParams(stored, tensors)
