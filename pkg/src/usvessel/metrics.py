"""Overlap metrics, TP/FP/FN overlays and per-dataset summaries."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .volume import VolumeError, VoxelVolume, atomic_write

__all__ = [
    "SegmentationReport",
    "Summary",
    "evaluate",
    "aggregate",
    "overlay",
    "dice_to_iou",
    "write_reports_csv",
    "write_summary_json",
    "BACKGROUND",
    "TRUE_POSITIVE",
    "FALSE_POSITIVE",
    "FALSE_NEGATIVE",
]

BACKGROUND, TRUE_POSITIVE, FALSE_POSITIVE, FALSE_NEGATIVE = 0, 1, 2, 3


@dataclass(frozen=True)
class SegmentationReport:
    tp: int
    fp: int
    fn: int
    volume_id: str = ""

    @property
    def empty(self):
        return self.tp + self.fp + self.fn == 0

    @property
    def dice_fraction(self):
        if self.empty:
            return Fraction(1)
        return Fraction(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def iou_fraction(self):
        if self.empty:
            return Fraction(1)
        return Fraction(self.tp, self.tp + self.fp + self.fn)

    @property
    def dice(self):
        return float(self.dice_fraction)

    @property
    def iou(self):
        return float(self.iou_fraction)


class Summary(NamedTuple):
    mean_dice: float
    sd_dice: float
    mean_iou: float
    sd_iou: float
    n: int


def dice_to_iou(dice):
    return dice / (2 - dice)


def _binary_pair(pred, truth):
    if pred.dims != truth.dims:
        raise VolumeError(f"dims mismatch: {pred.dims} vs {truth.dims}")
    p, t = np.asarray(pred.data), np.asarray(truth.data)
    for name, arr in (("prediction", p), ("truth", t)):
        if not np.isin(arr, (0, 1)).all():
            raise VolumeError(f"{name} is not binary")
    return p.astype(bool), t.astype(bool)


def evaluate(pred, truth, volume_id=""):
    """Voxel counts for a binary prediction against a binary reference.

    Two empty masks count as perfect agreement (Dice = IoU = 1).
    """
    p, t = _binary_pair(pred, truth)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return SegmentationReport(tp, fp, fn, volume_id)


def aggregate(reports):
    """Per-volume means and population standard deviations."""
    reports = list(reports)
    if not reports:
        raise ValueError("cannot aggregate zero reports")
    dice = np.array([r.dice for r in reports])
    iou = np.array([r.iou for r in reports])
    return Summary(float(dice.mean()), float(dice.std()), float(iou.mean()), float(iou.std()), len(reports))


def overlay(pred, truth):
    """Label map with codes 0 background, 1 TP, 2 FP, 3 FN."""
    p, t = _binary_pair(pred, truth)
    codes = np.zeros(p.shape, dtype=np.uint8)
    codes[p & t] = TRUE_POSITIVE
    codes[p & ~t] = FALSE_POSITIVE
    codes[~p & t] = FALSE_NEGATIVE
    return VoxelVolume(codes, truth.spacing, truth.origin, kind="labelmap")


def write_reports_csv(reports, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["volume_id", "dice", "iou", "tp", "fp", "fn"])
    for r in reports:
        w.writerow([r.volume_id, repr(r.dice), repr(r.iou), r.tp, r.fp, r.fn])
    atomic_write(path, buf.getvalue())


def write_summary_json(summary, path):
    atomic_write(path, json.dumps(summary._asdict(), indent=2, sort_keys=True) + "\n")
