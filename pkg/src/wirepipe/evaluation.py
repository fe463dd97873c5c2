"""Wire segmentation and inpainting metrics.

Dataset-level scores pool pixel counts over images (micro-average).
Ratios with a zero denominator score 1.0 when prediction and ground truth
are both empty and 0.0 otherwise.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .imagecore import InvalidInputError, as_mask
from .io import atomic_write_bytes

__all__ = [
    "ConfusionCounts",
    "confusion",
    "iou",
    "f1",
    "precision",
    "recall",
    "SIZE_BUCKETS",
    "size_bucket",
    "bucketed_iou",
    "psnr",
    "PSNR_CAP",
    "segmentation_report",
    "inpainting_report",
    "write_report",
]

PSNR_CAP = 99.0


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def identical_empty(self) -> bool:
        return self.tp + self.fp + self.fn == 0


def confusion(pred, gt) -> ConfusionCounts:
    p = as_mask(pred).astype(bool)
    g = as_mask(gt).astype(bool)
    if p.shape != g.shape:
        raise InvalidInputError(f"prediction {p.shape} and ground truth {g.shape} differ")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p)) - tp
    fn = int(np.count_nonzero(g)) - tp
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num, den, c: ConfusionCounts) -> float:
    if den == 0:
        return 1.0 if c.identical_empty else 0.0
    return num / den


def iou(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn, c)


def f1(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, c)


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp, c)


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, c)


# (name, exclusive lower bound, inclusive upper bound) on pixel area
SIZE_BUCKETS = (
    ("small", 0, 3000 ** 2),
    ("medium", 3000 ** 2, 6000 ** 2),
    ("large", 6000 ** 2, None),
)


def size_bucket(height: int, width: int) -> str:
    area = height * width
    for name, lo, hi in SIZE_BUCKETS:
        if area > lo and (hi is None or area <= hi):
            return name
    raise InvalidInputError(f"image of area {area} fits no size bucket")


def bucketed_iou(results: Iterable) -> dict[str, float]:
    """Pooled IoU per size bucket from ``(counts, (height, width))`` records.

    Buckets without images are left out of the result.
    """
    pooled: dict[str, ConfusionCounts] = {}
    for counts, (h, w) in results:
        name = size_bucket(h, w)
        pooled[name] = pooled.get(name, ConfusionCounts()) + counts
    return {name: iou(pooled[name]) for name, _, _ in SIZE_BUCKETS if name in pooled}


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` over all samples of two [0, 1] images, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"images differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _scores(c: ConfusionCounts) -> dict:
    return {"iou": iou(c), "f1": f1(c), "precision": precision(c), "recall": recall(c)}


def segmentation_report(records: Sequence[tuple[str, ConfusionCounts, tuple[int, int]]]) -> dict:
    """Per-image rows plus pooled summaries for ``(name, counts, (h, w))`` records."""
    images = []
    total = ConfusionCounts()
    for name, c, (h, w) in records:
        images.append({"name": name, "height": h, "width": w, "bucket": size_bucket(h, w),
                       **asdict(c), **_scores(c)})
        total = total + c
    summary = {"all": {**asdict(total), **_scores(total)}}
    for bucket, value in bucketed_iou((c, hw) for _, c, hw in records).items():
        summary[bucket] = {"iou": value}
    return {"images": images, "summary": summary}


def inpainting_report(records: Sequence[tuple[str, float]]) -> dict:
    images = [{"name": name, "psnr": value} for name, value in records]
    vals = [v for _, v in records]
    summary = {"all": {"psnr": float(np.mean(vals)) if vals else None, "n": len(vals)}}
    return {"images": images, "summary": summary}


def write_report(path, report: dict) -> None:
    """Write a report as JSON, or as CSV (one row per image, then one per summary)."""
    path = str(path)
    if path.endswith(".json"):
        atomic_write_bytes(path, (json.dumps(report, indent=2) + "\n").encode())
        return
    rows = [dict(r) for r in report["images"]]
    for key, vals in report["summary"].items():
        rows.append({"name": f"summary:{key}", **vals})
    columns = []
    for r in rows:
        columns.extend(k for k in r if k not in columns)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_bytes(path, buf.getvalue().encode())
