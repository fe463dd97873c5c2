"""Two-stage coarse-to-fine wire segmentation and wire removal."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import special

from .imagecore import (
    InvalidInputError,
    as_image,
    bilinear_resize,
    softmax_logits,
)
from .inpaint import InpaintReport, Inpainter, tile_inpaint_report
from .model import Segmenter, assemble_coarse_input, assemble_fine_input
from .tiling import (
    MergeAccumulator,
    WindowSpec,
    finalize_merge,
    gate_windows,
    gen_windows,
    map_windows,
    merge_patch,
)

# segmenters compute in single precision; probabilities are kept in double
MODEL_DTYPE = np.float32

__all__ = [
    "PipelineConfig",
    "SegmentationResult",
    "ModelFailure",
    "segment",
    "RemovalReport",
    "remove",
    "remove_report",
    "ProfileRow",
    "profile",
]


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable constant of segmentation and inpainting.

    ``stride=None`` means "equal to ``p_infer``". ``lam`` weighs the fine
    loss against the coarse loss (``"lambda"`` is accepted in mappings).
    """

    p_train: int = 512
    p_infer: int = 1024
    alpha: float = 0.01
    stride: int | None = None
    minmax_kernel: int = 6
    lam: float = 1.0
    inpaint_tile: int = 512
    inpaint_overlap: int = 32
    onion_d: int = 7

    def __post_init__(self):
        for name in ("p_train", "p_infer", "minmax_kernel", "inpaint_tile", "onion_d"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {v!r}")
        if self.stride is not None and not 1 <= self.stride <= self.p_infer:
            raise InvalidInputError(f"stride must be in [1, p_infer], got {self.stride}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInputError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise InvalidInputError(f"lambda must be non-negative, got {self.lam}")
        if not 0 <= self.inpaint_overlap < self.inpaint_tile:
            raise InvalidInputError(
                f"inpaint overlap must be in [0, tile), got {self.inpaint_overlap} "
                f"with tile {self.inpaint_tile}")

    @property
    def infer_stride(self) -> int:
        return self.p_infer if self.stride is None else self.stride

    @classmethod
    def from_mapping(cls, data: Mapping) -> "PipelineConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegmentationResult:
    """Output of :func:`segment`.

    ``wire`` is the merged full-resolution wire probability; ``prob`` is
    the equivalent ``[background, wire]`` map, built on first access.
    """

    wire: np.ndarray
    mask: np.ndarray
    coarse_prob: np.ndarray
    windows_total: int
    windows_refined: int
    refined: list = field(default_factory=list)
    elapsed: dict = field(default_factory=dict)

    @cached_property
    def prob(self) -> np.ndarray:
        out = np.empty(self.wire.shape + (2,))
        out[:, :, 1] = self.wire
        np.subtract(1.0, self.wire, out=out[:, :, 0])
        return out


class ModelFailure(RuntimeError):
    def __init__(self, stage: str, window: WindowSpec | None, cause: BaseException):
        where = f" on window {tuple(window)}" if window is not None else ""
        super().__init__(f"{stage} forward failed{where}: {cause}")
        self.stage = stage
        self.window = window


def _check_logits(z, shape, stage, window=None) -> np.ndarray:
    z = np.asarray(z)
    if z.shape != tuple(shape) + (2,):
        raise ModelFailure(stage, window, InvalidInputError(
            f"expected logits of shape {tuple(shape) + (2,)}, got {z.shape}"))
    if not np.all(np.isfinite(z)):
        raise ModelFailure(stage, window, FloatingPointError("non-finite logits"))
    return z


def _wire_prob(z: np.ndarray) -> np.ndarray:
    # computed at the logits' own precision (float32 for the bundled models)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float64)
    d = np.subtract(z[:, :, 1], z[:, :, 0])
    return special.expit(d, out=d)


def segment(img, model: Segmenter, cfg: PipelineConfig = PipelineConfig(),
            threads: int = 1) -> SegmentationResult:
    """Segment wires in an image of any size.

    1. bilinearly resize the image to ``p_infer x p_infer`` and run the
       coarse branch (condition channel zero);
    2. upsample the coarse probabilities to full resolution; their argmax
       is the coarse mask;
    3. run the fine branch on every sliding window whose coarse wire
       fraction reaches ``alpha``, conditioned on the upsampled coarse
       probability of that window;
    4. average overlapping fine predictions; pixels no refined window
       covers keep the upsampled coarse probability.
    """
    t0 = time.perf_counter()
    x = as_image(img, channels=3)
    h, w = x.shape[:2]
    p, k = cfg.p_infer, cfg.minmax_kernel

    x_ds = bilinear_resize(x, p, p)
    try:
        z = model.coarse_forward(assemble_coarse_input(x_ds, k, MODEL_DTYPE))
    except Exception as exc:
        raise ModelFailure("coarse", None, exc) from exc
    p_glo = softmax_logits(_check_logits(z, (p, p), "coarse").astype(np.float64))
    # the two classes sum to one, so only the wire channel is carried at
    # full resolution; background is 1 - wire
    wire_up = bilinear_resize(p_glo[:, :, 1], h, w)
    # for w in [0, 1], w > 1 - w exactly when w > 0.5 (1 - w is exact for
    # w >= 0.5), so this is the argmax rule with ties to background
    coarse_mask = (wire_up > 0.5).view(np.uint8)
    t1 = time.perf_counter()

    windows = gen_windows(h, w, p, cfg.infer_stride)
    accepted, _ = gate_windows(windows, coarse_mask, cfg.alpha)

    def refine(win: WindowSpec) -> np.ndarray:
        rows, cols = win.slices
        xin = assemble_fine_input(x[rows, cols], wire_up[rows, cols], k, MODEL_DTYPE,
                                  validate=False)
        try:
            zl = model.fine_forward(xin, window=win)
        except Exception as exc:
            raise ModelFailure("fine", win, exc) from exc
        return _wire_prob(_check_logits(zl, (win.h, win.w), "fine", win))

    acc = MergeAccumulator.empty(h, w, classes=1)
    # merge in window order so the result never depends on thread timing
    for win, wire in zip(accepted, map_windows(refine, accepted, threads)):
        merge_patch(acc, win, wire[:, :, None])
    t2 = time.perf_counter()
    wire = finalize_merge(acc, wire_up[:, :, None])[:, :, 0]
    mask = (wire > 0.5).view(np.uint8)
    t3 = time.perf_counter()
    return SegmentationResult(
        wire=wire, mask=mask, coarse_prob=p_glo,
        windows_total=len(windows), windows_refined=len(accepted), refined=accepted,
        elapsed={"coarse": t1 - t0, "fine": t2 - t1, "merge": t3 - t2, "total": t3 - t0},
    )


@dataclass
class RemovalReport:
    image: np.ndarray
    segmentation: SegmentationResult
    inpaint: InpaintReport


def remove_report(img, model: Segmenter, inpainter: Inpainter,
                  cfg: PipelineConfig = PipelineConfig(), threads: int = 1) -> RemovalReport:
    seg = segment(img, model, cfg, threads)
    rep = tile_inpaint_report(img, seg.mask, inpainter, cfg.inpaint_tile, cfg.inpaint_overlap,
                              cfg.onion_d, threads)
    return RemovalReport(rep.image, seg, rep)


def remove(img, model: Segmenter, inpainter: Inpainter,
           cfg: PipelineConfig = PipelineConfig(), threads: int = 1) -> np.ndarray:
    """Segment wires and inpaint them away; pixels off the predicted mask are untouched."""
    return remove_report(img, model, inpainter, cfg, threads).image


@dataclass
class ProfileRow:
    alpha: float
    n_images: int
    avg_s: float
    min_s: float
    max_s: float
    windows_refined: int
    windows_total: int


def profile(imgs: Sequence, model: Segmenter | Iterable[Segmenter],
            cfg: PipelineConfig = PipelineConfig(), alphas: Sequence[float] | None = None,
            threads: int = 1) -> list[ProfileRow]:
    """Wall-clock seconds per image and refined-window counts, one row per alpha.

    ``model`` may be a single segmenter or one per image.
    """
    alphas = [cfg.alpha] if alphas is None else list(alphas)
    models = list(model) if isinstance(model, (list, tuple)) else [model] * len(imgs)
    if len(models) != len(imgs):
        raise InvalidInputError("need one model per image")
    rows = []
    for a in alphas:
        c = PipelineConfig.from_mapping({**cfg.to_dict(), "alpha": a})
        times, refined, total = [], 0, 0
        for im, mdl in zip(imgs, models):
            t = time.perf_counter()
            res = segment(im, mdl, c, threads)
            times.append(time.perf_counter() - t)
            refined += res.windows_refined
            total += res.windows_total
        rows.append(ProfileRow(a, len(times), float(np.mean(times)) if times else 0.0,
                               min(times, default=0.0), max(times, default=0.0), refined, total))
    return rows
