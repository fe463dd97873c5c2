"""Sliding windows over arbitrary-resolution rasters.

Windows are generated on a row-major grid and clamped at the far edges,
gated by the wire fraction of a coarse mask, and merged back with a plain
per-pixel average.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .imagecore import InvalidInputError, as_mask

__all__ = [
    "WindowSpec",
    "gen_windows",
    "wire_fraction",
    "gate_windows",
    "extract_patch",
    "MergeAccumulator",
    "merge_patch",
    "finalize_merge",
    "map_windows",
]


class WindowSpec(NamedTuple):
    x: int
    y: int
    w: int
    h: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)

    def check_within(self, height: int, width: int) -> None:
        if (self.x < 0 or self.y < 0 or self.w < 1 or self.h < 1
                or self.x + self.w > width or self.y + self.h > height):
            raise InvalidInputError(f"window {tuple(self)} outside {height}x{width} raster")


def _origins(n: int, p: int, stride: int) -> list[int]:
    if n <= p:
        return [0]
    last = n - p
    out = list(range(0, last, stride))
    out.append(last)
    return out


def gen_windows(height: int, width: int, p: int, stride: int | None = None) -> list[WindowSpec]:
    """Row-major p x p windows at ``stride``; the last window per axis is
    clamped so its far edge meets the image edge. Images smaller than ``p``
    along an axis get a single window spanning that axis.
    """
    stride = p if stride is None else stride
    if p < 1:
        raise InvalidInputError(f"patch size must be >= 1, got {p}")
    if not 1 <= stride <= p:
        raise InvalidInputError(f"stride must be in [1, {p}], got {stride}")
    wh, ww = min(p, height), min(p, width)
    return [WindowSpec(x, y, ww, wh)
            for y in _origins(height, p, stride)
            for x in _origins(width, p, stride)]


def wire_fraction(mask, win: WindowSpec) -> float:
    m = np.asarray(mask)
    win = WindowSpec(*win)
    win.check_within(*m.shape[:2])
    return int(np.count_nonzero(m[win.slices])) / (win.w * win.h)


def gate_windows(windows: Iterable[WindowSpec], coarse_mask, alpha: float):
    """Split windows into (accepted, skipped) by ``wire_fraction >= alpha``.

    ``alpha = 0`` accepts every window.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must be in [0, 1], got {alpha}")
    m = as_mask(coarse_mask)
    accepted, skipped = [], []
    for win in windows:
        win = WindowSpec(*win)
        win.check_within(*m.shape)
        frac = int(np.count_nonzero(m[win.slices])) / (win.w * win.h)
        (accepted if frac >= alpha else skipped).append(win)
    return accepted, skipped


def extract_patch(img, win: WindowSpec) -> np.ndarray:
    a = np.asarray(img)
    win = WindowSpec(*win)
    win.check_within(*a.shape[:2])
    return a[win.slices].copy()


@dataclass
class MergeAccumulator:
    """Running per-pixel sum and coverage count of patch predictions."""

    sum: np.ndarray
    count: np.ndarray

    @classmethod
    def empty(cls, height: int, width: int, classes: int = 2) -> "MergeAccumulator":
        return cls(np.zeros((height, width, classes), dtype=np.float64),
                   np.zeros((height, width), dtype=np.int32))

    @property
    def shape(self) -> tuple[int, int]:
        return self.count.shape

    def covered(self) -> np.ndarray:
        return self.count > 0


def merge_patch(acc: MergeAccumulator, win: WindowSpec, patch_probs) -> MergeAccumulator:
    """Add one patch's probabilities into the accumulator (in place)."""
    win = WindowSpec(*win)
    win.check_within(*acc.shape)
    p = np.asarray(patch_probs)
    if p.shape != (win.h, win.w, acc.sum.shape[2]):
        raise InvalidInputError(
            f"patch of shape {p.shape} does not match window {tuple(win)}")
    rows, cols = win.slices
    acc.sum[rows, cols] += p
    acc.count[rows, cols] += 1
    return acc


def finalize_merge(acc: MergeAccumulator, fill) -> np.ndarray:
    """Average covered pixels; uncovered pixels take their value from ``fill``."""
    fill = np.asarray(fill)
    if fill.shape != acc.sum.shape:
        raise InvalidInputError(f"fill of shape {fill.shape} does not match {acc.sum.shape}")
    out = np.array(fill, dtype=np.float64)
    np.divide(acc.sum, acc.count[:, :, None], out=out, where=acc.covered()[:, :, None])
    return out


def map_windows(fn: Callable, items: Sequence, threads: int = 1) -> Iterator:
    """``map(fn, items)`` on up to ``threads`` worker threads, results in input order."""
    if threads <= 1 or len(items) <= 1:
        yield from map(fn, items)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield from pool.map(fn, items)
