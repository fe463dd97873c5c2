"""Segmenters for the two-stage pipeline.

A segmenter exposes two forward passes over 6-channel inputs laid out as
``[R, G, B, condition, min-luminance, max-luminance]``:

* ``coarse_forward(x)`` on the downsampled whole image (condition = 0)
* ``fine_forward(x, window=...)`` on a full-resolution patch whose
  condition channel is the upsampled coarse wire probability

Both return ``(H, W, 2)`` logits. :class:`TinyConvSegmenter` is a small
numpy CNN with a shared encoder and separate coarse/fine decoders,
trained with momentum SGD; :class:`OracleSegmenter` replays a ground
truth mask and exists for testing the pipeline around it.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import cv2
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imagecore import (
    InvalidInputError,
    as_image,
    as_mask,
    bilinear_resize_crop,
    luminance,
    max_filter,
    maxpool_downsample_mask,
    min_filter,
    softmax_logits,
)
from .io import atomic_write_bytes
from .tiling import WindowSpec

__all__ = [
    "Segmenter",
    "assemble_coarse_input",
    "assemble_fine_input",
    "cross_entropy",
    "LossReport",
    "total_loss",
    "TinyConvSegmenter",
    "TrainingError",
    "sgd_step",
    "poly_lr",
    "TrainLog",
    "train_tiny",
    "OracleSegmenter",
    "oracle_segmenter",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

PROB_FLOOR = 1e-7
N_INPUT_CHANNELS = 6


class Segmenter(Protocol):
    def coarse_forward(self, x: np.ndarray) -> np.ndarray: ...

    def fine_forward(self, x: np.ndarray, window: WindowSpec | None = None) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# input assembly
# ---------------------------------------------------------------------------

def _fill_input(rgb: np.ndarray, cond, k: int, dtype) -> np.ndarray:
    rgb = rgb.astype(dtype, copy=False)
    if cond is None:
        c = np.zeros(rgb.shape[:2], dtype=dtype)
    else:
        c = np.asarray(cond).astype(dtype, copy=False)
    lum = luminance(rgb)[:, :, 0]
    # cv2.merge interleaves the planes in one pass
    return cv2.merge([np.ascontiguousarray(rgb), np.ascontiguousarray(c),
                      min_filter(lum, k), max_filter(lum, k)])


def _input_dtype(rgb: np.ndarray, dtype):
    return rgb.dtype if dtype is None else np.dtype(dtype)


def assemble_coarse_input(img_ds, k: int = 6, dtype=None) -> np.ndarray:
    """``[R, G, B, 0, minLum, maxLum]`` for the downsampled global image.

    ``dtype`` defaults to the image's own floating dtype.
    """
    rgb = as_image(img_ds, channels=3)
    return _fill_input(rgb, None, k, _input_dtype(rgb, dtype))


def assemble_fine_input(patch, cond, k: int = 6, dtype=None, *, validate: bool = True) -> np.ndarray:
    """``[R, G, B, cond, minLum, maxLum]`` for a full-resolution patch.

    ``cond`` is the wire probability over the patch: an ``(H, W)`` array,
    ``(H, W, 1)``, or a 2-class probability crop (its wire channel is used).
    ``validate=False`` skips the sample range scan for patches cut from an
    image that was already checked.
    """
    rgb = as_image(patch, channels=3, check_range=validate)
    c = np.asarray(cond)
    if c.ndim == 3:
        c = c[:, :, -1]
    if c.shape != rgb.shape[:2]:
        raise InvalidInputError(f"condition {c.shape} does not match patch {rgb.shape[:2]}")
    return _fill_input(rgb, c, k, _input_dtype(rgb, dtype))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _gt_prob(p: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.where(gt == 1, p[..., 1], p[..., 0])


def cross_entropy(p, gt) -> float:
    """Mean over pixels of ``-log p(true class)``, probabilities floored at 1e-7."""
    p = np.asarray(p)
    gt = as_mask(gt) if np.ndim(gt) == 2 else np.asarray(gt)
    if p.shape[:-1] != gt.shape or p.shape[-1] != 2:
        raise InvalidInputError(f"probabilities {p.shape} do not match labels {gt.shape}")
    q = np.clip(_gt_prob(p, gt), PROB_FLOOR, 1.0)
    return float(-np.log(q).mean())


@dataclass(frozen=True)
class LossReport:
    loss_glo: float
    loss_loc: float
    total: float
    lam: float = 1.0


def total_loss(p_glo, g_glo, p_loc, g_loc, lam: float = 1.0) -> LossReport:
    lg = cross_entropy(p_glo, g_glo)
    ll = cross_entropy(p_loc, g_loc)
    return LossReport(lg, ll, lg + lam * ll, lam)


def _ce_logit_grad(logits: np.ndarray, gt: np.ndarray, n_total: int):
    """Summed CE over a batch of logits and its gradient wrt the logits."""
    p = softmax_logits(logits.reshape(-1, logits.shape[-2], 2)).reshape(logits.shape)
    q = _gt_prob(p, gt)
    loss = float(-np.log(np.clip(q, PROB_FLOOR, 1.0)).sum(dtype=np.float64))
    onehot = np.stack([gt == 0, gt == 1], axis=-1).astype(p.dtype)
    grad = p - onehot
    grad[q <= PROB_FLOOR] = 0.0  # clamped region has zero slope
    return loss, grad / n_total, p


# ---------------------------------------------------------------------------
# tiny conv net
# ---------------------------------------------------------------------------

_CHUNK_PX = 1 << 16


def _row_chunks(h: int, w: int):
    step = max(1, _CHUNK_PX // max(w, 1))
    for r0 in range(0, h, step):
        yield r0, min(h, r0 + step)


def _cols(xp_n: np.ndarray, r0: int, r1: int) -> np.ndarray:
    w = xp_n.shape[1] - 2
    v = sliding_window_view(xp_n[r0:r1 + 2], (3, 3), axis=(0, 1))
    return v.reshape((r1 - r0) * w, -1)


def conv3x3_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' 3x3 convolution of ``(N, H, W, Cin)`` inputs.

    ``weight`` has shape ``(Cin, 3, 3, Cout)``.
    """
    n, h, w, _ = x.shape
    wm = weight.reshape(-1, weight.shape[-1])
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.empty((n, h, w, wm.shape[1]), dtype=x.dtype)
    for i in range(n):
        for r0, r1 in _row_chunks(h, w):
            out[i, r0:r1] = (_cols(xp[i], r0, r1) @ wm).reshape(r1 - r0, w, -1)
    out += bias
    return out


def conv3x3_backward(x, weight, dout, need_dx: bool = True):
    """Gradients of :func:`conv3x3_forward` wrt weight, bias and (optionally) x."""
    n, h, w, cin = x.shape
    cout = weight.shape[-1]
    wm = weight.reshape(-1, cout)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    dw = np.zeros_like(wm)
    db = dout.sum(axis=(0, 1, 2))
    dxp = np.zeros_like(xp) if need_dx else None
    for i in range(n):
        for r0, r1 in _row_chunks(h, w):
            g = dout[i, r0:r1].reshape(-1, cout)
            dw += _cols(xp[i], r0, r1).T @ g
            if need_dx:
                dc = (g @ wm.T).reshape(r1 - r0, w, cin, 3, 3)
                for dy in range(3):
                    for dx in range(3):
                        dxp[i, r0 + dy:r1 + dy, dx:dx + w] += dc[..., dy, dx]
    dx_out = dxp[:, 1:-1, 1:-1] if need_dx else None
    return dw.reshape(weight.shape), db, dx_out


class TrainingError(RuntimeError):
    pass


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    """The "poly" schedule ``lr * (1 - step/total)^power``."""
    if total_steps <= 0:
        return base_lr
    return base_lr * max(0.0, 1.0 - step / total_steps) ** power


class TinyConvSegmenter:
    """Shared 3x3 conv encoder with separate coarse and fine decoders.

    Layout (tanh between layers, none after the last)::

        encoder:  6 -> W -> W
        decoders: W -> W -> 2   (one for coarse, one for fine)

    All parameters live in one flat vector (:attr:`flat`); per-layer
    weights and biases are views into it.
    """

    ENCODER = ("enc0", "enc1")
    DECODERS = {"coarse": ("coarse0", "coarse1"), "fine": ("fine0", "fine1")}

    def __init__(self, width: int = 16, seed: int = 0, dtype=np.float32,
                 lr: float = 0.01, momentum: float = 0.9, wire_prior: float = 0.05):
        self.width = width
        self.dtype = np.dtype(dtype)
        self.lr = lr
        self.momentum = momentum
        self.step_count = 0
        self.shapes = self._layer_shapes(width)
        size = sum(int(np.prod(s)) + s[-1] for s in self.shapes.values())
        self.flat = np.zeros(size, dtype=self.dtype)
        self.velocity = np.zeros_like(self.flat)
        self._bind()
        self._init_params(seed, wire_prior)

    @staticmethod
    def _layer_shapes(width: int) -> dict[str, tuple[int, ...]]:
        shapes = {"enc0": (N_INPUT_CHANNELS, 3, 3, width), "enc1": (width, 3, 3, width)}
        for head in ("coarse", "fine"):
            shapes[f"{head}0"] = (width, 3, 3, width)
            shapes[f"{head}1"] = (width, 3, 3, 2)
        return shapes

    def _bind(self) -> None:
        self.weights: dict[str, np.ndarray] = {}
        self.biases: dict[str, np.ndarray] = {}
        off = 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            self.weights[name] = self.flat[off:off + n].reshape(shape)
            off += n
            self.biases[name] = self.flat[off:off + shape[-1]]
            off += shape[-1]

    def _init_params(self, seed: int, wire_prior: float) -> None:
        rng = np.random.default_rng(seed)
        for name, shape in self.shapes.items():
            fan_in = shape[0] * 9
            self.weights[name][...] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        for head in self.DECODERS.values():
            last = head[-1]
            self.weights[last] *= 0.1
            self.biases[last][1] = np.log(wire_prior / (1.0 - wire_prior))

    @property
    def n_params(self) -> int:
        return self.flat.size

    def parameter_table(self) -> list[tuple[str, tuple[int, ...]]]:
        table = []
        for name, shape in self.shapes.items():
            table.append((f"{name}.weight", tuple(shape)))
            table.append((f"{name}.bias", (shape[-1],)))
        return table

    def copy(self) -> "TinyConvSegmenter":
        other = TinyConvSegmenter.__new__(TinyConvSegmenter)
        other.__dict__.update(self.__dict__)
        other.flat = self.flat.copy()
        other.velocity = self.velocity.copy()
        other._bind()
        return other

    # forward / backward ---------------------------------------------------

    def _path(self, head: str) -> tuple[str, ...]:
        return self.ENCODER + self.DECODERS[head]

    def _forward(self, x: np.ndarray, head: str):
        """Logits for a batch ``(N, H, W, 6)`` plus the activations backward needs."""
        acts = [x]
        path = self._path(head)
        a = x
        for i, name in enumerate(path):
            z = conv3x3_forward(a, self.weights[name], self.biases[name])
            a = z if i == len(path) - 1 else np.tanh(z, out=z)
            acts.append(a)
        return a, acts

    def _backward(self, acts, dlogits: np.ndarray, head: str, grad: np.ndarray) -> None:
        gw = self._grad_views(grad)
        path = self._path(head)
        d = dlogits
        for i in range(len(path) - 1, -1, -1):
            name = path[i]
            dw, db, dx = conv3x3_backward(acts[i], self.weights[name], d, need_dx=i > 0)
            gw[0][name] += dw
            gw[1][name] += db
            if i > 0:
                d = dx * (1.0 - acts[i] ** 2)

    def _grad_views(self, grad: np.ndarray):
        ws, bs, off = {}, {}, 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            ws[name] = grad[off:off + n].reshape(shape)
            off += n
            bs[name] = grad[off:off + shape[-1]]
            off += shape[-1]
        return ws, bs

    def _run(self, x, head: str) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[2] != N_INPUT_CHANNELS:
            raise InvalidInputError(f"segmenter input must be (H, W, 6), got {x.shape}")
        logits, _ = self._forward(x[None].astype(self.dtype, copy=False), head)
        return logits[0]

    def coarse_forward(self, x) -> np.ndarray:
        return self._run(x, "coarse")

    def fine_forward(self, x, window: WindowSpec | None = None) -> np.ndarray:
        return self._run(x, "fine")

    # training ---------------------------------------------------------------

    def loss_and_grad(self, batch: Sequence, lam: float = 1.0, k: int = 6, conds=None):
        """Total loss over a batch of sample pairs and its gradient.

        Each pair needs ``global_image``, ``global_mask``, ``local_image``,
        ``local_mask``, ``window`` and ``full_shape`` attributes. The fine
        branch is conditioned on this model's own coarse prediction,
        upsampled to ``full_shape`` and cropped at ``window``; no gradient
        flows through the condition. ``conds`` (one wire-probability crop
        per pair) replaces that condition with fixed maps.
        """
        if not batch:
            raise InvalidInputError("empty batch")
        dt = self.dtype
        xg = np.stack([assemble_coarse_input(s.global_image, k, dt) for s in batch])
        gg = np.stack([as_mask(s.global_mask) for s in batch])
        grad = np.zeros_like(self.flat)

        zg, acts_g = self._forward(xg, "coarse")
        loss_g, dzg, pg = _ce_logit_grad(zg, gg, gg.size)
        self._backward(acts_g, dzg, "coarse", grad)

        if conds is None:
            conds = []
            for s, p in zip(batch, pg):
                fh, fw = s.full_shape
                conds.append(bilinear_resize_crop(p[:, :, 1], fh, fw, s.window))
        elif len(conds) != len(batch):
            raise InvalidInputError("need one condition map per pair")
        xl = np.stack([assemble_fine_input(s.local_image, c, k, dt)
                       for s, c in zip(batch, conds)])
        gl = np.stack([as_mask(s.local_mask) for s in batch])
        zl, acts_l = self._forward(xl, "fine")
        loss_l, dzl, _ = _ce_logit_grad(zl, gl, gl.size)
        self._backward(acts_l, dzl * dt.type(lam), "fine", grad)

        lg, ll = loss_g / gg.size, loss_l / gl.size
        return LossReport(lg, ll, lg + lam * ll, lam), grad

    def sgd_step(self, batch: Sequence, lr: float | None = None,
                 momentum: float | None = None, lam: float = 1.0) -> LossReport:
        lr = self.lr if lr is None else lr
        momentum = self.momentum if momentum is None else momentum
        report, grad = self.loss_and_grad(batch, lam)
        if not (np.isfinite(report.total) and np.all(np.isfinite(grad))):
            bad = int(np.count_nonzero(~np.isfinite(grad)))
            raise TrainingError(
                f"non-finite loss at step {self.step_count}: glo={report.loss_glo} "
                f"loc={report.loss_loc}, {bad} non-finite gradient entries")
        self.velocity *= momentum
        self.velocity += grad
        self.flat -= self.dtype.type(lr) * self.velocity
        self.step_count += 1
        return report


def sgd_step(model: TinyConvSegmenter, batch: Sequence, lr: float = 0.01,
             momentum: float = 0.9, lam: float = 1.0):
    """One momentum-SGD update; returns ``(model, LossReport)``."""
    report = model.sgd_step(batch, lr, momentum, lam)
    return model, report


@dataclass
class TrainLog:
    step: int
    lr: float
    report: LossReport


def train_tiny(model: TinyConvSegmenter, scenes: Sequence, iters: int, p: int = 512,
               batch_size: int = 1, lr: float | None = None, momentum: float | None = None,
               lam: float = 1.0, seed: int = 0, schedule: str = "constant",
               augment_pairs: bool = False, callback=None) -> list[TrainLog]:
    """Train ``model`` in place with momentum SGD on ``(image, mask)`` scenes.

    Each step draws ``batch_size`` scenes and one balanced pair per scene
    (see :func:`wirepipe.dataset.sample_patch`). ``seed`` fixes scene order,
    crops and augmentation. ``schedule`` is ``"constant"`` or ``"poly"``.
    Returns one log entry per step; ``callback(log)`` sees them as they come.
    """
    from .dataset import augment, sample_patch

    if iters < 0:
        raise InvalidInputError(f"iters must be >= 0, got {iters}")
    if schedule not in ("constant", "poly"):
        raise InvalidInputError(f"unknown schedule {schedule!r}")
    if iters and not scenes:
        raise InvalidInputError("no training scenes")
    base_lr = model.lr if lr is None else lr
    rng = np.random.default_rng(seed)
    logs = []
    for step in range(iters):
        idx = rng.integers(0, len(scenes), size=batch_size)
        batch = []
        for i in idx:
            image, mask = scenes[int(i)]
            pair = sample_patch(image, mask, p, rng)
            batch.append(augment(pair, rng) if augment_pairs else pair)
        step_lr = poly_lr(base_lr, step, iters) if schedule == "poly" else base_lr
        report = model.sgd_step(batch, step_lr, momentum, lam)
        log = TrainLog(step, step_lr, report)
        logs.append(log)
        if callback is not None:
            callback(log)
    return logs


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

def _nearest_upsample(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(np.intp)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(np.intp)
    return mask[np.ix_(rows, cols)]


def mask_at_size(mask, out_h: int, out_w: int) -> np.ndarray:
    """Max-pool a mask down to ``out_h x out_w``, nearest-upsampling any growing axis."""
    m = as_mask(mask)
    h, w = m.shape
    if out_h > h or out_w > w:
        m = _nearest_upsample(m, max(h, out_h), max(w, out_w))
    return maxpool_downsample_mask(m, out_h, out_w)


class OracleSegmenter:
    """Replays a full-resolution ground-truth mask as +/-``magnitude`` logits."""

    def __init__(self, gt_full, magnitude: float = 10.0):
        self.gt = as_mask(gt_full)
        self.magnitude = magnitude

    def _logits(self, m: np.ndarray) -> np.ndarray:
        z = np.zeros(m.shape + (2,), dtype=np.float32)
        wire = z[:, :, 1]
        np.multiply(m, 2 * self.magnitude, out=wire, casting="unsafe")
        wire -= self.magnitude
        return z

    def coarse_forward(self, x) -> np.ndarray:
        h, w = np.shape(x)[:2]
        return self._logits(mask_at_size(self.gt, h, w))

    def fine_forward(self, x, window: WindowSpec | None = None) -> np.ndarray:
        if window is None:
            raise InvalidInputError("the oracle needs the window of each fine call")
        win = WindowSpec(*window)
        win.check_within(*self.gt.shape)
        if np.shape(x)[:2] != (win.h, win.w):
            raise InvalidInputError(f"input {np.shape(x)[:2]} does not match window {tuple(win)}")
        return self._logits(self.gt[win.slices])


def oracle_segmenter(gt_full, magnitude: float = 10.0) -> OracleSegmenter:
    return OracleSegmenter(gt_full, magnitude)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"WIREPIPE"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: TinyConvSegmenter) -> bytes:
    """Serialise a model.

    Layout (little-endian): magic, u32 version, u32 metadata length, UTF-8
    JSON metadata, u32 tensor count, per tensor ``u16 name length, name,
    u8 ndim, u32 dims...``, the float32 parameter block, and a trailing
    u32 CRC-32 of everything before it.
    """
    meta = json.dumps({"width": model.width, "lr": model.lr, "momentum": model.momentum,
                       "step_count": model.step_count, "activation": "tanh"},
                      sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta]
    table = model.parameter_table()
    parts.append(struct.pack("<I", len(table)))
    for name, shape in table:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
    parts.append(model.flat.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: TinyConvSegmenter, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model))


def load_checkpoint(path, dtype=np.float32) -> TinyConvSegmenter:
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 16 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a wirepipe checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    off = len(CHECKPOINT_MAGIC)
    version, meta_len = struct.unpack_from("<II", body, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    meta = json.loads(body[off:off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        table.append((name, tuple(shape)))
    model = TinyConvSegmenter(width=meta["width"], dtype=dtype,
                              lr=meta["lr"], momentum=meta["momentum"])
    if table != model.parameter_table():
        raise CheckpointError(f"{path}: layer table does not match a width-{meta['width']} model")
    if off + 4 * model.n_params != len(body):
        raise CheckpointError(f"{path}: parameter block has the wrong length")
    model.flat[...] = np.frombuffer(body, dtype="<f4", count=model.n_params, offset=off)
    model.step_count = meta.get("step_count", 0)
    return model
