"""Soft-Dice training of the U-Net with L1 regularization and Adam."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, augment_pair, volume_rng
from .metrics import evaluate
from .unet import UNetConfig, build, forward, infer_volume, save_params
from .volume import VoxelVolume, atomic_write, read_volume

__all__ = [
    "TrainConfig",
    "AdamState",
    "Dataset",
    "TrainingError",
    "dice_loss",
    "l1_penalty",
    "adam_step",
    "train",
    "load_manifest",
    "write_manifest",
    "write_history_csv",
    "history_csv",
]

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
HISTORY_COLUMNS = ("step", "epoch", "train_loss", "val_dice")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-3
    l1_weight: float = 1e-5
    batch_size: int = 2
    max_epochs: int = 217
    smooth: float = 1e-5
    checkpoint_every: int = 10
    seed: int = 0
    dtype: str = "float32"
    val_overlap: int = 16
    val_threshold: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.smooth > 0:
            raise ValueError("smooth must be positive")
        if self.l1_weight < 0 or self.max_epochs < 0 or self.checkpoint_every < 1:
            raise ValueError("l1_weight and max_epochs must be >= 0, checkpoint_every >= 1")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params):
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


# -- losses -------------------------------------------------------------------


def dice_loss(pred, target, smooth=1e-5):
    """``1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`` over the whole batch."""
    t = np.asarray(target.value if isinstance(target, ad.Tensor) else target)
    if t.shape != pred.shape:
        raise ValueError(f"prediction {pred.shape} and target {t.shape} shapes differ")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("dice target must be binary")
    p = pred.value
    t = t.astype(p.dtype)
    inter = float(np.vdot(p.astype(np.float64).ravel(), t.astype(np.float64).ravel()))
    num = 2.0 * inter + smooth
    den = float(p.sum(dtype=np.float64)) + float(t.sum(dtype=np.float64)) + smooth
    loss = np.asarray(1.0 - num / den)

    def _backward(g):
        g = float(g)
        grad = -(2.0 * t * den - num) / (den * den)
        return ((g * grad).astype(p.dtype, copy=False),)

    return ad.make_op(loss, (pred,), _backward, "dice_loss")


def l1_penalty(params, weight):
    """``weight * sum(|w|)`` over convolution kernels (biases and gains excluded)."""
    if weight < 0:
        raise ValueError("L1 weight must be non-negative")
    kernels = params.weight_tensors() if hasattr(params, "weight_tensors") else list(params)
    acc = ad.l1_norm(kernels[0])
    for k in kernels[1:]:
        acc = ad.add(acc, ad.l1_norm(k))
    return ad.scale(acc, weight)


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update, replacing each parameter's value array."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state lengths differ")
    for g in grads:
        if g is not None and not np.isfinite(g).all():
            raise ad.NonFiniteError("non-finite gradient passed to adam_step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.value = (p.value.astype(np.float64) - lr * update).astype(p.value.dtype)


# -- data ---------------------------------------------------------------------


@dataclass
class Dataset:
    """Image/label pairs grouped by split; items are ``(id, image, label)``."""

    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @classmethod
    def from_manifest(cls, path):
        ds = cls()
        for entry in load_manifest(path):
            item = (entry["id"], read_volume(entry["image"]), read_volume(entry["label"], kind="label"))
            getattr(ds, entry["split"]).append(item)
        return ds


def load_manifest(path):
    """Entries with absolute ``image``/``label`` paths and a split tag."""
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = []
    for i, e in enumerate(doc.get("volumes", [])):
        split = e.get("split", "train")
        if split not in SPLITS:
            raise ValueError(f"manifest entry {i}: unknown split {split!r}")
        entries.append(
            {
                "id": e.get("id", f"volume_{i:03d}"),
                "image": str(path.parent / e["image"]),
                "label": str(path.parent / e["label"]),
                "split": split,
            }
        )
    return entries


def write_manifest(entries, path):
    doc = {"volumes": [{k: e[k] for k in ("id", "image", "label", "split")} for e in entries]}
    atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                    for c in HISTORY_COLUMNS])
    return buf.getvalue()


def write_history_csv(history, path):
    atomic_write(path, history_csv(history))


# -- training loop ------------------------------------------------------------


def _patch_origins(dims, size, count, rng):
    if any(d < p for d, p in zip(dims, size)):
        raise ValueError(f"volume {dims} is smaller than patch size {size}")
    return [tuple(int(rng.integers(0, d - p + 1)) for d, p in zip(dims, size)) for _ in range(count)]


def _materialize(image, label, origin, aug_cfg, rng):
    sl = tuple(slice(o, o + s) for o, s in zip(origin, aug_cfg.patch_size))
    im = VoxelVolume(image.data[sl], image.spacing)
    lb = VoxelVolume(label.data[sl], label.spacing, kind="label")
    im, lb, _ = augment_pair(im, lb, aug_cfg, rng)
    return im.data, lb.data


def validation_dice(params, items, tile, overlap, threshold):
    scores = [
        evaluate(infer_volume(params, img, tile, overlap, threshold), lab).dice for _, img, lab in items
    ]
    return float(np.mean(scores))


def train(dataset, train_cfg=TrainConfig(), unet_cfg=UNetConfig(), augment_cfg=AugmentConfig(),
          out_dir=None, params=None, callback=None):
    """Train and return ``(params, history)``.

    ``dataset`` is a :class:`Dataset` or a manifest path. Each epoch draws
    ``patches_per_volume`` augmented patches from every training volume,
    shuffles them and takes Adam steps on batches of ``batch_size``. With
    ``out_dir`` set, checkpoints ``epoch_NNNN.params`` and ``loss.csv`` are
    written there. ``callback(epoch, params, history)`` runs after each epoch.
    """
    if not isinstance(dataset, Dataset):
        dataset = Dataset.from_manifest(dataset)
    if not dataset.train:
        raise TrainingError("dataset has no training volumes")
    dtype = np.dtype(train_cfg.dtype)
    if params is None:
        params = build(unet_cfg, train_cfg.seed, dtype=dtype)
    state = AdamState.init(params)
    history = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_params(params, out_dir / "epoch_0000.params")

    seed = augment_cfg.seed
    step = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        jobs = []
        for vi, (_, image, label) in enumerate(dataset.train):
            if image.dims != label.dims:
                raise TrainingError(f"training volume {vi}: image and label dims differ")
            rng = volume_rng(seed, epoch, vi)
            for j, origin in enumerate(
                _patch_origins(image.dims, augment_cfg.patch_size, augment_cfg.patches_per_volume, rng)
            ):
                jobs.append((vi, j, origin))
        order = volume_rng(seed, epoch, len(dataset.train), 1).permutation(len(jobs))
        jobs = [jobs[i] for i in order]

        for start in range(0, len(jobs), train_cfg.batch_size):
            batch = jobs[start:start + train_cfg.batch_size]
            xs, ys = [], []
            for vi, j, origin in batch:
                _, image, label = dataset.train[vi]
                x, y = _materialize(image, label, origin, augment_cfg, volume_rng(seed, epoch, vi, j + 1))
                xs.append(x)
                ys.append(y)
            x = np.stack(xs)[:, None].astype(dtype)
            y = np.stack(ys)[:, None]
            try:
                pred = forward(params, x)
                loss = ad.add(dice_loss(pred, y, train_cfg.smooth), l1_penalty(params, train_cfg.l1_weight))
                params.zero_grad()
                ad.backward(loss)
            except ad.NonFiniteError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}, step {step + 1}: {exc}") from exc
            adam_step(params, [p.grad for p in params], state, train_cfg.learning_rate)
            step += 1
            history.append({"step": step, "epoch": epoch, "train_loss": float(loss.value), "val_dice": None})

        if dataset.val and history:
            history[-1]["val_dice"] = validation_dice(
                params, dataset.val, augment_cfg.patch_size, train_cfg.val_overlap, train_cfg.val_threshold
            )
        log.info("epoch %d: last loss %.5f val dice %s", epoch, history[-1]["train_loss"], history[-1]["val_dice"])
        if out_dir is not None and (epoch % train_cfg.checkpoint_every == 0 or epoch == train_cfg.max_epochs):
            save_params(params, out_dir / f"epoch_{epoch:04d}.params")
            write_history_csv(history, out_dir / "loss.csv")
        if callback is not None:
            callback(epoch, params, history)

    if out_dir is not None:
        write_history_csv(history, out_dir / "loss.csv")
        save_params(params, out_dir / "final.params")
    return params, history

