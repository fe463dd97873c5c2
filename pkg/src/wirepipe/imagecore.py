"""Raster containers and deterministic pixel operations.

Rasters are plain numpy arrays with a fixed layout:

* image: ``(H, W, C)`` floating point, samples in ``[0, 1]``, ``1 <= C <= 8``
* mask: ``(H, W)`` ``uint8`` holding exactly 0 or 1
* prob: ``(H, W, 2)`` floating point, per-pixel class distribution
  ``[background, wire]``

The ``as_*`` helpers validate and normalise inputs at API boundaries.
Every operation here is a pure function of its arguments.
"""
from __future__ import annotations

import cv2
import numpy as np
from scipy import special

__all__ = [
    "InvalidInputError",
    "as_image",
    "as_mask",
    "as_prob",
    "luminance",
    "min_filter",
    "max_filter",
    "bilinear_resize",
    "bilinear_resize_crop",
    "maxpool_downsample_mask",
    "footprint_bounds",
    "dilate",
    "onion_ring",
    "softmax_logits",
    "argmax_classes",
]

REC709 = np.array([0.2126, 0.7152, 0.0722])
PROB_SUM_TOL = 1e-5


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


def as_image(img, *, channels: int | None = None, check_range: bool = True) -> np.ndarray:
    """Validate an image raster, promoting ``(H, W)`` to ``(H, W, 1)``.

    Floating inputs keep their dtype; anything else becomes float64.
    """
    a = np.asarray(img)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise InvalidInputError(f"image must be (H, W, C), got shape {a.shape}")
    h, w, c = a.shape
    if h < 1 or w < 1:
        raise InvalidInputError(f"image must be at least 1x1, got {h}x{w}")
    if not 1 <= c <= 8:
        raise InvalidInputError(f"image must have 1-8 channels, got {c}")
    if channels is not None and c != channels:
        raise InvalidInputError(f"expected {channels} channels, got {c}")
    if check_range:
        # min/max propagate NaN and catch infinities, so one pass of each suffices
        lo, hi = a.min(), a.max()
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise InvalidInputError("image contains non-finite samples")
        if lo < 0.0 or hi > 1.0:
            raise InvalidInputError("image samples must lie in [0, 1]")
    return a


def as_mask(mask) -> np.ndarray:
    """Validate a binary mask and return it as ``uint8`` 0/1."""
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[:, :, 0]
    if m.ndim != 2:
        raise InvalidInputError(f"mask must be (H, W), got shape {m.shape}")
    if m.dtype == np.bool_:
        return m.astype(np.uint8)
    if not np.all((m == 0) | (m == 1)):
        raise InvalidInputError("mask values must be exactly 0 or 1")
    return m.astype(np.uint8, copy=False)


def as_prob(prob, *, tol: float = PROB_SUM_TOL) -> np.ndarray:
    p = np.asarray(prob)
    if p.ndim != 3 or p.shape[2] != 2:
        raise InvalidInputError(f"probability map must be (H, W, 2), got shape {p.shape}")
    if not np.issubdtype(p.dtype, np.floating):
        p = p.astype(np.float64)
    if p.size:
        if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
            raise InvalidInputError("probabilities must be finite and in [0, 1]")
        if np.abs(p.sum(axis=2) - 1.0).max() > tol:
            raise InvalidInputError("class probabilities must sum to 1")
    return p


def luminance(img) -> np.ndarray:
    """Rec.709 luma of an RGB image, returned as ``(H, W, 1)``."""
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise InvalidInputError(f"luminance needs a 3-channel image, got shape {a.shape}")
    y = a @ REC709.astype(a.dtype) if np.issubdtype(a.dtype, np.floating) else a @ REC709
    return np.clip(y, 0.0, 1.0)[:, :, None]


def _check_kernel(k: int, name: str = "k") -> int:
    if int(k) != k or k < 1:
        raise InvalidInputError(f"{name} must be a positive integer, got {k!r}")
    return int(k)


def _morph(a: np.ndarray, k: int, op, border: int) -> np.ndarray:
    # anchor (k-1)//2 puts the window at [i - (k-1)//2, i - (k-1)//2 + k - 1]
    a0 = (k - 1) // 2
    return op(np.ascontiguousarray(a), np.ones((k, k), np.uint8), anchor=(a0, a0),
              borderType=border, borderValue=0)


def _rank_filter(chan, k: int, op) -> np.ndarray:
    k = _check_kernel(k)
    a = np.asarray(chan)
    if a.dtype not in (np.float32, np.float64, np.uint8):
        a = a.astype(np.float64)
    if a.ndim == 3:
        if a.shape[2] != 1:
            raise InvalidInputError(f"filter expects a single channel, got shape {a.shape}")
        return _morph(a[:, :, 0], k, op, cv2.BORDER_REPLICATE)[:, :, None]
    if a.ndim != 2:
        raise InvalidInputError(f"filter expects (H, W) or (H, W, 1), got shape {a.shape}")
    return _morph(a, k, op, cv2.BORDER_REPLICATE)


def min_filter(chan, k: int = 6) -> np.ndarray:
    """k x k minimum filter with edge replication.

    The window for output row ``i`` spans rows ``i - (k-1)//2`` through
    ``i - (k-1)//2 + k - 1`` (likewise for columns), so an even 6x6 window
    covers ``[i-2, i+3]``.
    """
    return _rank_filter(chan, k, cv2.erode)


def max_filter(chan, k: int = 6) -> np.ndarray:
    """k x k maximum filter; same anchoring and borders as :func:`min_filter`."""
    return _rank_filter(chan, k, cv2.dilate)


def _axis_sampling(n_in: int, n_out: int, start: int = 0, stop: int | None = None):
    """Source indices and weights for half-pixel-centre bilinear sampling."""
    stop = n_out if stop is None else stop
    dst = np.arange(start, stop, dtype=np.float64)
    src = (dst + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    return i0, i1, w1


def _interp_axis(a: np.ndarray, axis: int, i0, i1, w1) -> np.ndarray:
    shape = [1] * a.ndim
    shape[axis] = -1
    w1 = w1.reshape(shape).astype(a.dtype, copy=False)
    lo = np.take(a, i0, axis=axis)
    out = np.take(a, i1, axis=axis)
    # lo + (hi - lo) * w is exact on constant runs and stays within [lo, hi]
    out -= lo
    out *= w1
    out += lo
    return out


def _check_target(out_h: int, out_w: int) -> None:
    if out_h < 1 or out_w < 1:
        raise InvalidInputError(f"target size must be at least 1x1, got {out_h}x{out_w}")


def bilinear_resize(img, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centre alignment (no antialiasing).

    Works on ``(H, W)`` and ``(H, W, C)`` arrays. Equal sizes return an
    exact copy.
    """
    _check_target(out_h, out_w)
    a = np.asarray(img)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    h, w = a.shape[:2]
    if (h, w) == (out_h, out_w):
        return a.copy()
    if h < 2 or w < 2 or a.dtype not in (np.float32, np.float64):
        return bilinear_resize_crop(a, out_h, out_w, (0, 0, out_w, out_h))
    return _cv2_resize(a, out_h, out_w)


def _cv2_resize(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    # OpenCV's INTER_LINEAR uses the same half-pixel convention; its float
    # kernels agree with the separable lerp to a few ulps for 1, 3 and 4
    # channels, so other channel counts go one plane at a time.
    def run(x):
        r = cv2.resize(np.ascontiguousarray(x), (out_w, out_h), interpolation=cv2.INTER_LINEAR)
        return r.reshape(out_h, out_w, -1) if x.ndim == 3 else r

    if a.ndim == 2 or a.shape[2] in (1, 3, 4):
        return run(a)
    return np.stack([run(a[:, :, c]) for c in range(a.shape[2])], axis=2)


def bilinear_resize_crop(img, out_h: int, out_w: int, window) -> np.ndarray:
    """The ``window`` region of ``bilinear_resize(img, out_h, out_w)``.

    Only the requested output pixels are computed (separable
    ``lo + (hi - lo) * w`` interpolation); the result matches resizing the
    whole image and slicing up to rounding. ``window`` is ``(x, y, w, h)``
    in output coordinates.
    """
    _check_target(out_h, out_w)
    x, y, w, h = (int(v) for v in window)
    if x < 0 or y < 0 or w < 1 or h < 1 or x + w > out_w or y + h > out_h:
        raise InvalidInputError(f"window {window} outside {out_h}x{out_w} output")
    a = np.asarray(img)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    in_h, in_w = a.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return a[y:y + h, x:x + w].copy()
    r0, r1, rw = _axis_sampling(in_h, out_h, y, y + h)
    c0, c1, cw = _axis_sampling(in_w, out_w, x, x + w)
    tmp = _interp_axis(a, 0, r0, r1, rw)
    return _interp_axis(tmp, 1, c0, c1, cw)


def footprint_bounds(n_in: int, n_out: int):
    """Half-open source ranges ``[lo, hi)`` covered by each downsampled cell.

    Cell ``i`` covers ``floor(i*n_in/n_out)`` to ``ceil((i+1)*n_in/n_out) - 1``;
    neighbouring footprints overlap when the ratio is fractional.
    """
    i = np.arange(n_out, dtype=np.int64)
    lo = (i * n_in) // n_out
    hi = -((-(i + 1) * n_in) // n_out)
    return lo, hi


def maxpool_downsample_mask(mask, out_h: int, out_w: int) -> np.ndarray:
    """Downsample a binary mask so that no annotated pixel disappears.

    An output cell is 1 iff any source pixel of its footprint (see
    :func:`footprint_bounds`) is 1.
    """
    m = as_mask(mask)
    h, w = m.shape
    _check_target(out_h, out_w)
    if out_h > h or out_w > w:
        raise InvalidInputError(f"cannot max-pool {h}x{w} up to {out_h}x{out_w}")
    if (h, w) == (out_h, out_w):
        return m.copy()
    if h % out_h == 0 and w % out_w == 0:
        # integer ratios: footprints are disjoint fh x fw blocks
        fh, fw = h // out_h, w // out_w
        out = m[::fh, ::fw].copy()
        for i in range(fh):
            for j in range(fw):
                np.maximum(out, m[i::fh, j::fw], out=out)
        return out
    acc = np.int32 if h * w < 2 ** 31 else np.int64
    integral = np.zeros((h + 1, w + 1), dtype=acc)
    np.cumsum(np.cumsum(m, axis=0, dtype=acc), axis=1, out=integral[1:, 1:])
    r_lo, r_hi = footprint_bounds(h, out_h)
    c_lo, c_hi = footprint_bounds(w, out_w)
    total = (integral[np.ix_(r_hi, c_hi)] - integral[np.ix_(r_lo, c_hi)]
             - integral[np.ix_(r_hi, c_lo)] + integral[np.ix_(r_lo, c_lo)])
    return (total > 0).astype(np.uint8)


def dilate(mask, d: int) -> np.ndarray:
    """Binary dilation by a d x d square; outside the canvas counts as 0."""
    d = _check_kernel(d, "d")
    m = as_mask(mask)
    return _morph(m, d, cv2.dilate, cv2.BORDER_CONSTANT)


def onion_ring(mask, d: int) -> np.ndarray:
    """The band ``dilate(mask, d) - mask`` just outside the mask."""
    m = as_mask(mask)
    return dilate(m, d) & (1 - m)


def softmax_logits(logits) -> np.ndarray:
    z = np.asarray(logits)
    if z.ndim != 3:
        raise InvalidInputError(f"logits must be (H, W, K), got shape {z.shape}")
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float64)
    if z.shape[2] == 2:
        out = np.empty(z.shape, dtype=z.dtype)
        d = np.subtract(z[:, :, 1], z[:, :, 0])
        special.expit(d, out=out[:, :, 1])
        np.negative(d, out=d)
        special.expit(d, out=out[:, :, 0])
        return out
    e = np.exp(z - z.max(axis=2, keepdims=True))
    return e / e.sum(axis=2, keepdims=True)


def argmax_classes(prob) -> np.ndarray:
    """Wire where the wire probability is strictly greatest; ties go to background."""
    p = np.asarray(prob)
    if p.ndim != 3 or p.shape[2] != 2:
        raise InvalidInputError(f"probability map must be (H, W, 2), got shape {p.shape}")
    return (p[:, :, 1] > p[:, :, 0]).astype(np.uint8)
