"""Synthetic wire scenes and training-sample extraction.

Scenes are smooth colour gradients with low-frequency noise, crossed by
anti-aliased parabolic strokes. Every function takes an explicit seed or
``numpy.random.Generator`` so outputs are reproducible.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imagecore import InvalidInputError, as_image, as_mask, bilinear_resize, maxpool_downsample_mask
from .io import atomic_write_bytes
from .tiling import WindowSpec, wire_fraction

__all__ = [
    "SynthScene",
    "synth_scene",
    "scene_seed",
    "SamplingError",
    "SamplePair",
    "sample_patch",
    "AugmentParams",
    "draw_augment",
    "apply_augment",
    "augment",
    "nonwire_crops",
    "write_manifest",
    "read_manifest",
]

MAX_WIRE_FRACTION = 0.2
SUPERSAMPLE = 4


@dataclass
class SynthScene:
    image: np.ndarray
    mask: np.ndarray
    background: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def wire_fraction(self) -> float:
        return float(self.mask.mean())


def scene_seed(base_seed: int, index: int) -> int:
    """Per-scene seed derived from a base seed, independent of generation order."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def _background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    c0, c1 = rng.uniform(0.25, 0.9, size=(2, 3))
    theta = rng.uniform(0, 2 * np.pi)
    tx = np.cos(theta) * np.arange(w) / w
    ty = np.sin(theta) * np.arange(h) / h
    lo = tx.min() + ty.min()
    span = max(tx.max() + ty.max() - lo, 1e-9)
    t = (ty[:, None] + (tx[None, :] - lo)) / span
    img = bilinear_resize(rng.normal(0.0, 0.06, size=(5, 5, 3)), h, w)
    img += c0
    img += (c1 - c0) * t[:, :, None]
    return np.clip(img, 0.0, 1.0, out=img)


def _parabola(n_along: int, n_across: int, curvature: float, rng):
    """Coefficients of ``f(u) = a u^2 + b u + c`` (u in pixels along the wire).

    The curve runs across the whole canvas; its end offsets and sag are
    bounded so the slope never exceeds 1, which keeps the vertical-distance
    coverage estimate accurate.
    """
    y0 = rng.uniform(0.1, 0.9) * n_across
    y1 = np.clip(y0 + rng.uniform(-0.3, 0.3) * n_along, 0.05 * n_across, 0.95 * n_across)
    sag = rng.uniform(-curvature, curvature) * n_along
    lim = 0.25 * (n_along - abs(y1 - y0))
    sag = float(np.clip(sag, -lim, lim))
    # f(0)=y0, f(L)=y1, f(L/2)=(y0+y1)/2 + sag
    length = float(n_along)
    a = -4.0 * sag / length ** 2
    b = (y1 - y0) / length - a * length
    return a, b, y0


def _stroke_coverage(n_along: int, n_across: int, coeffs, thickness: float):
    """Fractional pixel coverage of a stroke around ``across = f(along)``.

    Coverage is estimated with SUPERSAMPLE^2 samples per pixel, using the
    perpendicular distance ``|v - f(u)| / sqrt(1 + f'(u)^2)``. Only a band
    of pixels around the curve is sampled; returns ``(across, along,
    coverage)`` for the pixels with nonzero coverage.
    """
    a, b, c = coeffs
    half = thickness / 2.0
    u = np.arange(n_along) + 0.5
    centre = a * u * u + b * u + c
    slope = np.abs(2 * a * u + b)
    reach = half * np.sqrt(1 + slope ** 2) + slope + 2
    lo = np.clip(np.floor(centre - reach).astype(int), 0, n_across)
    hi = np.clip(np.ceil(centre + reach).astype(int) + 1, 0, n_across)
    counts = hi - lo
    cols = np.repeat(np.arange(n_along), counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    rows = np.repeat(lo, counts) + offs
    sub = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    su = cols[:, None, None] + sub[None, :, None]
    sv = rows[:, None, None] + sub[None, None, :]
    f = a * su * su + b * su + c
    dist = np.abs(sv - f) / np.sqrt(1 + (2 * a * su + b) ** 2)
    cov = (dist <= half).mean(axis=(1, 2))
    keep = cov > 0
    return rows[keep], cols[keep], cov[keep]


def synth_scene(h: int, w: int, n_wires: int = 2, thickness_range=(2.0, 5.0),
                seed: int = 0, curvature: float = 0.08) -> SynthScene:
    """Render a wire scene deterministically from ``seed``.

    The mask marks pixels whose stroke coverage exceeds one half.
    """
    if h < 64 or w < 64:
        raise InvalidInputError(f"scene must be at least 64x64, got {h}x{w}")
    t_lo, t_hi = thickness_range
    if n_wires < 0 or not 0 < t_lo <= t_hi or curvature < 0:
        raise InvalidInputError(
            f"bad scene parameters: n_wires={n_wires}, thickness_range={thickness_range}, "
            f"curvature={curvature}")
    rng = np.random.default_rng(seed)
    bg = _background(h, w, rng)
    img = bg.copy()
    coverage = np.zeros((h, w), dtype=np.float32)
    wires = []
    for _ in range(n_wires):
        transpose = bool(rng.random() < 0.35)
        n_along, n_across = (h, w) if transpose else (w, h)
        coeffs = _parabola(n_along, n_across, curvature, rng)
        thickness = float(rng.uniform(t_lo, t_hi))
        across, along, cov = _stroke_coverage(n_along, n_across, coeffs, thickness)
        rows, cols = (along, across) if transpose else (across, along)
        if rng.random() < 0.75:
            color = rng.uniform(0.0, 0.2, size=3)
        else:
            color = rng.uniform(0.9, 1.0, size=3)
        v = cov[:, None]
        img[rows, cols] = img[rows, cols] * (1 - v) + color * v
        coverage[rows, cols] = np.maximum(coverage[rows, cols], cov)
        wires.append({"coeffs": [float(v) for v in coeffs], "transpose": transpose,
                      "thickness": thickness, "color": [float(v) for v in color]})
    mask = (coverage > 0.5).astype(np.uint8)
    frac = float(mask.mean())
    if frac > MAX_WIRE_FRACTION:
        raise InvalidInputError(f"wire fraction {frac:.3f} exceeds {MAX_WIRE_FRACTION}")
    params = {"height": h, "width": w, "n_wires": n_wires,
              "thickness_range": [float(t_lo), float(t_hi)], "curvature": curvature,
              "seed": seed, "wire_fraction": frac, "wires": wires}
    return SynthScene(np.clip(img, 0.0, 1.0, out=img), mask, bg, params)


# ---------------------------------------------------------------------------
# patch sampling
# ---------------------------------------------------------------------------

class SamplingError(RuntimeError):
    pass


@dataclass
class SamplePair:
    global_image: np.ndarray
    global_mask: np.ndarray
    local_image: np.ndarray
    local_mask: np.ndarray
    window: WindowSpec
    full_shape: tuple[int, int]
    fallback: bool = False


def sample_patch(image, mask, p: int, rng: np.random.Generator, min_frac: float = 0.01,
                 max_tries: int = 50) -> SamplePair:
    """A (global, local) training pair.

    The local half is a random p x p crop with wire fraction >= ``min_frac``.
    After ``max_tries`` misses the crop is centred on a random wire pixel
    instead and the pair is flagged with ``fallback=True``.
    """
    img = as_image(image, channels=3)
    m = as_mask(mask)
    h, w = m.shape
    if h < p or w < p:
        raise InvalidInputError(f"image {h}x{w} is smaller than the {p}x{p} patch")
    if not m.any():
        raise SamplingError("mask has no wire pixels; no local sample possible")
    win, fallback = None, False
    for _ in range(max_tries):
        cand = WindowSpec(int(rng.integers(0, w - p + 1)), int(rng.integers(0, h - p + 1)), p, p)
        if wire_fraction(m, cand) >= min_frac:
            win = cand
            break
    if win is None:
        ys, xs = np.nonzero(m)
        i = int(rng.integers(0, ys.size))
        x0 = int(np.clip(xs[i] - p // 2, 0, w - p))
        y0 = int(np.clip(ys[i] - p // 2, 0, h - p))
        win, fallback = WindowSpec(x0, y0, p, p), True
    rows, cols = win.slices
    return SamplePair(
        global_image=bilinear_resize(img, p, p),
        global_mask=maxpool_downsample_mask(m, p, p),
        local_image=img[rows, cols].copy(),
        local_mask=m[rows, cols].copy(),
        window=win,
        full_shape=(h, w),
        fallback=fallback,
    )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    rotation_deg: float = 0.0
    flip: bool = False
    brightness: float = 0.0
    contrast: float = 1.0

    @property
    def is_identity(self) -> bool:
        return (self.scale == 1.0 and self.rotation_deg == 0.0 and not self.flip
                and self.brightness == 0.0 and self.contrast == 1.0)


def draw_augment(rng: np.random.Generator) -> AugmentParams:
    """Scale in [0.5, 2], rotation in [-10, 10] degrees, flip with p=0.5,
    brightness shift and contrast factor within +/-20%."""
    return AugmentParams(
        scale=float(np.exp(rng.uniform(np.log(0.5), np.log(2.0)))),
        rotation_deg=float(rng.uniform(-10.0, 10.0)),
        flip=bool(rng.random() < 0.5),
        brightness=float(rng.uniform(-0.2, 0.2)),
        contrast=float(rng.uniform(0.8, 1.2)),
    )


def _inverse_map(params: AugmentParams, h: int, w: int):
    """Matrix and offset mapping output (row, col) to input (row, col)."""
    th = math.radians(params.rotation_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    fwd = rot * params.scale
    if params.flip:
        fwd = fwd @ np.diag([1.0, -1.0])
    inv = np.linalg.inv(fwd)
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    return inv, centre - inv @ centre


def _warp_pair(img, mask, params: AugmentParams):
    h, w = mask.shape
    if params.scale == 1.0 and params.rotation_deg == 0.0:
        if params.flip:
            return img[:, ::-1].copy(), mask[:, ::-1].copy()
        return img.copy(), mask.copy()
    mat, off = _inverse_map(params, h, w)
    out = np.stack([ndimage.affine_transform(img[:, :, c], mat, off, order=1, mode="nearest")
                    for c in range(img.shape[2])], axis=2)
    m = ndimage.affine_transform(mask, mat, off, order=0, mode="nearest")
    return out, m


def _photometric(img, params: AugmentParams):
    if params.brightness == 0.0 and params.contrast == 1.0:
        return img
    mean = img.mean(axis=(0, 1), keepdims=True)
    return np.clip((img - mean) * params.contrast + mean + params.brightness, 0.0, 1.0)


def apply_augment(pair: SamplePair, params: AugmentParams) -> SamplePair:
    """Apply one geometric + photometric draw to both halves of a pair.

    Each half is warped about its own centre; image and mask of a half share
    the exact same transform (bilinear for images, nearest for masks). A
    flip also mirrors the window so the condition crop stays aligned.
    """
    if params.is_identity:
        return replace(pair)
    gi, gm = _warp_pair(pair.global_image, pair.global_mask, params)
    li, lm = _warp_pair(pair.local_image, pair.local_mask, params)
    win = pair.window
    if params.flip:
        win = WindowSpec(pair.full_shape[1] - win.x - win.w, win.y, win.w, win.h)
    return replace(pair, global_image=_photometric(gi, params), global_mask=gm,
                   local_image=_photometric(li, params), local_mask=lm, window=win)


def augment(pair: SamplePair, rng: np.random.Generator) -> SamplePair:
    return apply_augment(pair, draw_augment(rng))


# ---------------------------------------------------------------------------
# inpainting data
# ---------------------------------------------------------------------------

def nonwire_crops(image, mask, n: int = 10, size: int = 680, rng=None,
                  max_tries: int = 1000) -> list[np.ndarray]:
    """Up to ``n`` random ``size x size`` crops that contain no wire pixel.

    Emits a ``UserWarning`` carrying the shortfall when fewer are found.
    """
    img = np.asarray(image)
    m = as_mask(mask)
    h, w = m.shape
    rng = np.random.default_rng() if rng is None else rng
    crops: list[np.ndarray] = []
    if h >= size and w >= size:
        integral = np.zeros((h + 1, w + 1), dtype=np.int64)
        np.cumsum(np.cumsum(m, axis=0, dtype=np.int64), axis=1, out=integral[1:, 1:])
        for _ in range(max_tries):
            if len(crops) == n:
                break
            y, x = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
            hits = (integral[y + size, x + size] - integral[y, x + size]
                    - integral[y + size, x] + integral[y, x])
            if hits == 0:
                crops.append(img[y:y + size, x:x + size].copy())
    if len(crops) < n:
        warnings.warn(f"only {len(crops)} of {n} wire-free {size}x{size} crops found "
                      f"({n - len(crops)} missing)", stacklevel=2)
    return crops


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def write_manifest(path, records) -> None:
    """One JSON object per line: ``{"image", "mask", "seed", "params", ...}``."""
    lines = [json.dumps(r, sort_keys=True) for r in records]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def read_manifest(path) -> list[dict]:
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            for key in ("image", "mask", "clean"):
                if key in rec and not Path(rec[key]).is_absolute():
                    rec[key] = str(path.parent / rec[key])
            out.append(rec)
    return out


def scene_record(scene: SynthScene, **paths) -> dict:
    rec = dict(paths)
    rec["seed"] = scene.params.get("seed")
    rec["params"] = {k: v for k, v in scene.params.items() if k != "wires"}
    return rec

