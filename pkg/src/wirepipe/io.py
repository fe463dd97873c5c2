"""PNG and PFM raster I/O.

Images are stored as 8- or 16-bit PNG (RGB or grayscale), masks as 8-bit
grayscale PNG with values 0/255, and float rasters (probability maps)
as little-endian PFM. All writers go through a temporary file and an
atomic rename so a crash never leaves a truncated output behind.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import cv2
import numpy as np

from .imagecore import InvalidInputError, as_image, as_mask, as_prob

__all__ = [
    "atomic_write_bytes",
    "read_image",
    "write_image",
    "read_mask",
    "write_mask",
    "read_pfm",
    "write_pfm",
    "read_prob",
    "write_prob",
]


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _decode_png(path) -> np.ndarray:
    buf = np.fromfile(str(path), dtype=np.uint8)
    raw = cv2.imdecode(buf, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InvalidInputError(f"cannot decode image {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        raw = raw[:, :, ::-1]
    return raw


def read_image(path, dtype=np.float64) -> np.ndarray:
    """Read an 8/16-bit PNG as an ``(H, W, C)`` float image in [0, 1]."""
    raw = _decode_png(path)
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise InvalidInputError(f"unsupported PNG sample type {raw.dtype} in {path}")
    img = raw.astype(dtype) / dtype(scale)
    if img.ndim == 2:
        img = img[:, :, None]
    return img


def quantize(img, bits: int = 8) -> np.ndarray:
    if bits not in (8, 16):
        raise InvalidInputError(f"PNG bit depth must be 8 or 16, got {bits}")
    top = 255 if bits == 8 else 65535
    a = np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * top)
    return a.astype(np.uint8 if bits == 8 else np.uint16)


def write_image(path, img, bits: int = 8) -> None:
    a = as_image(img)
    if a.shape[2] not in (1, 3):
        raise InvalidInputError(f"PNG output needs 1 or 3 channels, got {a.shape[2]}")
    q = quantize(a, bits)
    q = q[:, :, 0] if q.shape[2] == 1 else np.ascontiguousarray(q[:, :, ::-1])
    ok, enc = cv2.imencode(".png", q)
    if not ok:
        raise OSError(f"PNG encoding failed for {path}")
    atomic_write_bytes(path, enc.tobytes())


def read_mask(path) -> np.ndarray:
    """Read a mask PNG; any nonzero sample counts as wire."""
    raw = _decode_png(path)
    if raw.ndim == 3:
        raw = raw.max(axis=2)
    return (raw > 0).astype(np.uint8)


def write_mask(path, mask) -> None:
    m = as_mask(mask)
    ok, enc = cv2.imencode(".png", m * np.uint8(255))
    if not ok:
        raise OSError(f"PNG encoding failed for {path}")
    atomic_write_bytes(path, enc.tobytes())


def write_pfm(path, arr) -> None:
    """Write a 1- or 3-channel float raster as little-endian PFM."""
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise InvalidInputError(f"PFM holds 1 or 3 channels, got shape {a.shape}")
    h, w = a.shape[:2]
    header = tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n"
    # PFM scanlines run bottom to top
    body = np.ascontiguousarray(a[::-1]).astype("<f4").tobytes()
    atomic_write_bytes(path, header + body)


def _read_token(f) -> bytes:
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            break
        if c.isspace():
            if tok:
                break
            continue
        tok += c
    return tok


def read_pfm(path) -> np.ndarray:
    """Read a PFM file as ``(H, W)`` or ``(H, W, 3)`` float32."""
    with open(path, "rb") as f:
        tag = _read_token(f)
        if tag == b"PF":
            channels = 3
        elif tag == b"Pf":
            channels = 1
        else:
            raise InvalidInputError(f"{path} is not a PFM file")
        try:
            w, h = int(_read_token(f)), int(_read_token(f))
            scale = float(_read_token(f))
            dt = "<f4" if scale < 0 else ">f4"
            data = np.frombuffer(f.read(), dtype=dt, count=w * h * channels)
        except ValueError as exc:
            raise InvalidInputError(f"malformed or truncated PFM {path}: {exc}") from exc
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape)[::-1].astype(np.float32)


def write_prob(path, prob) -> None:
    """Store a probability map as the single-channel wire probability."""
    write_pfm(path, as_prob(prob)[:, :, 1])


def read_prob(path) -> np.ndarray:
    wire = np.clip(read_pfm(path).astype(np.float64), 0.0, 1.0)
    if wire.ndim != 2:
        raise InvalidInputError(f"{path} does not hold a single-channel probability map")
    return np.stack([1.0 - wire, wire], axis=2)
