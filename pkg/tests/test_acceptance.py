"""Acceptance suite: one test per criterion, each recording a PASS/FAIL verdict.

Run on its own with ``python3 tests/test_acceptance.py`` (or through
pytest); the verdicts are printed in the terminal summary.
"""
import itertools
import time

import numpy as np
import pytest
from scipy import ndimage

import oracles
from wirepipe.dataset import sample_patch, scene_seed, synth_scene
from wirepipe.evaluation import ConfusionCounts, confusion, f1, iou
from wirepipe.imagecore import luminance, maxpool_downsample_mask, onion_ring
from wirepipe.inpaint import DiffusionInpainter, apply_bias_and_composite, color_bias, tile_inpaint_report
from wirepipe.io import write_image
from wirepipe.model import TinyConvSegmenter, assemble_coarse_input, train_tiny
from wirepipe.pipeline import PipelineConfig, segment
from wirepipe.tiling import MergeAccumulator, WindowSpec, finalize_merge, gen_windows, merge_patch

# desk-scale training setup shared by criteria 2 and 6
SCENE = 512
PATCH = 128
TRAIN_SCENES, HELD_OUT, TEST_SCENES = 200, 50, 100
TRAIN_ITERS, LR, MOMENTUM = 2000, 0.01, 0.9
# criterion 2 gates on the coarse branch, which is still weak on bright
# wires after TRAIN_ITERS steps; it uses the same run continued this long
EXTRA_ITERS = 2000


@pytest.fixture(scope="session")
def train_scenes():
    scenes = [synth_scene(SCENE, SCENE, seed=scene_seed(100, i)) for i in range(TRAIN_SCENES)]
    return [(s.image, s.mask) for s in scenes]


@pytest.fixture(scope="session")
def trained(train_scenes):
    model = TinyConvSegmenter(width=16, seed=0, lr=LR, momentum=MOMENTUM)
    t = time.perf_counter()
    logs = train_tiny(model, train_scenes, TRAIN_ITERS, p=PATCH, seed=1)
    return model, time.perf_counter() - t, logs


@pytest.fixture(scope="session")
def trained_longer(trained, train_scenes):
    model = trained[0].copy()
    model.velocity[:] = 0
    train_tiny(model, train_scenes, EXTRA_ITERS, p=PATCH, seed=2)
    return model


def pooled_iou(model, scenes, alpha):
    cfg = PipelineConfig(p_train=PATCH, p_infer=PATCH, alpha=alpha)
    total, refined, windows = ConfusionCounts(), 0, 0
    for s in scenes:
        res = segment(s.image, model, cfg)
        total = total + confusion(res.mask, s.mask)
        refined += res.windows_refined
        windows += res.windows_total
    return iou(total), refined, windows


def test_c01_oracle_identity(verdict):
    from wirepipe.model import OracleSegmenter

    scenes = [synth_scene(2048, 2048, seed=scene_seed(1, i)) for i in range(20)]
    cfg = PipelineConfig(alpha=0.0)
    total, elapsed, exact = ConfusionCounts(), 0.0, True
    for s in scenes:
        model = OracleSegmenter(s.mask)
        t = time.perf_counter()
        res = segment(s.image, model, cfg)
        elapsed += time.perf_counter() - t
        total = total + confusion(res.mask, s.mask)
        exact &= bool(np.array_equal(res.mask, s.mask))
    score = iou(total)
    ok = score == 1.0 and exact and elapsed < 10.0
    verdict(1, ok, f"IoU {score!r}, pipeline time {elapsed:.2f} s for 20 scenes (limit 10 s)")
    assert ok


def test_c02_alpha_gating(trained_longer, verdict):
    model = trained_longer
    scenes = [synth_scene(SCENE, SCENE, n_wires=1, seed=scene_seed(300, i)) for i in range(TEST_SCENES)]
    t = time.perf_counter()
    iou0, ref0, tot = pooled_iou(model, scenes, 0.0)
    iou1, ref1, _ = pooled_iou(model, scenes, 0.01)
    elapsed = time.perf_counter() - t
    ok_iou = iou1 >= iou0 - 0.02
    ok_win = ref1 <= 0.6 * ref0
    ok = ok_iou and ok_win and elapsed < 300
    verdict(2, ok, f"IoU {iou0:.4f} (alpha 0) vs {iou1:.4f} (alpha 0.01); refined windows "
                   f"{ref0} vs {ref1} of {tot} ({ref1 / ref0:.2f}x); {elapsed:.0f} s; "
                   f"model trained {TRAIN_ITERS + EXTRA_ITERS} steps")
    assert ok


def _random_mask(rng):
    h, w = rng.integers(32, 200, size=2)
    m = np.zeros((h, w), np.uint8)
    for _ in range(rng.integers(1, 4)):
        # one-pixel-wide straight segment
        r0, c0, r1, c1 = rng.integers(0, h), rng.integers(0, w), rng.integers(0, h), rng.integers(0, w)
        n = max(abs(r1 - r0), abs(c1 - c0)) + 1
        m[np.linspace(r0, r1, n).round().astype(int), np.linspace(c0, c1, n).round().astype(int)] = 1
    dots = rng.integers(0, 6)
    m[rng.integers(0, h, dots), rng.integers(0, w, dots)] = 1
    return m


def _footprint_matrix(n_in, n_out):
    a = np.zeros((n_in, n_out), bool)
    for i in range(n_out):
        a[(i * n_in) // n_out: -(-(i + 1) * n_in // n_out), i] = True
    return a


def test_c03_maxpool_preservation(verdict):
    rng = np.random.default_rng(3)
    lost, wire_px, covered_px = 0, 0, 0
    for _ in range(1000):
        m = _random_mask(rng)
        labels, n = ndimage.label(m, structure=np.ones((3, 3)))
        for f in (2, 4, 8, 16):
            oh, ow = max(1, m.shape[0] // f), max(1, m.shape[1] // f)
            pooled = maxpool_downsample_mask(m, oh, ow)
            a, b = _footprint_matrix(m.shape[0], oh), _footprint_matrix(m.shape[1], ow)
            # pixels inside the footprint of at least one positive output cell
            covered = (a.astype(int) @ pooled.astype(int) @ b.T.astype(int)) > 0
            wire_px += int(m.sum())
            covered_px += int((covered & (m == 1)).sum())
            lost += n - len(np.unique(labels[covered & (labels > 0)]))
    recall = covered_px / wire_px
    ok = lost == 0 and recall == 1.0
    verdict(3, ok, f"{lost} components lost, footprint recall {recall!r} over 4000 poolings")
    assert ok


def test_c04_minmax_brute_force(verdict):
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(50):
        img = rng.random((64, 64, 3))
        x = assemble_coarse_input(img)
        lum = luminance(img)[:, :, 0]
        mismatches += int(not np.array_equal(x[:, :, 4], oracles.window_rank(lum, 6, np.min)))
        mismatches += int(not np.array_equal(x[:, :, 5], oracles.window_rank(lum, 6, np.max)))
    ok = mismatches == 0
    verdict(4, ok, f"{mismatches} of 100 filtered channels differ from the brute-force oracle")
    assert ok


def test_c05_gradient_check(verdict):
    worst = 0.0
    for b in range(5):
        rng = np.random.default_rng(50 + b)
        model = TinyConvSegmenter(width=8, seed=b, dtype=np.float64)
        model.flat += rng.normal(0, 0.05, model.flat.size)
        batch = []
        for j in range(2):
            s = synth_scene(96, 96, seed=scene_seed(5, 2 * b + j))
            batch.append(sample_patch(s.image, s.mask, 32, rng))
        conds = [rng.random((32, 32)) for _ in batch]
        _, grad = model.loss_and_grad(batch, 1.0, conds=conds)
        idx = rng.choice(model.flat.size, 20, replace=False)
        num = oracles.numeric_grad(lambda: model.loss_and_grad(batch, 1.0, conds=conds)[0].total,
                                   model.flat, idx, h=1e-4)
        ana = grad[idx]
        rel = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        worst = max(worst, float(rel.max()))
    ok = worst < 1e-3
    verdict(5, ok, f"max relative error {worst:.2e} over 5 batches x 20 parameters (limit 1e-3)")
    assert ok


def test_c06_training_sanity(trained, verdict):
    model, train_s, _ = trained
    held = [synth_scene(SCENE, SCENE, seed=scene_seed(200, i)) for i in range(HELD_OUT)]
    t = time.perf_counter()
    score, _, _ = pooled_iou(model, held, 0.0)
    background = iou(sum((confusion(np.zeros_like(s.mask), s.mask) for s in held), ConfusionCounts()))
    total_s = train_s + time.perf_counter() - t
    ok = score >= 0.30 and background == 0.0 and total_s < 1200
    verdict(6, ok, f"held-out IoU {score:.4f} (all-background {background}); "
                   f"{TRAIN_ITERS} steps in {train_s:.0f} s, {total_s:.0f} s with evaluation")
    assert ok


def test_c07_onion_peel(verdict):
    rng = np.random.default_rng(7)
    x = 0.25 + 0.5 * rng.random((48, 64, 3))
    m = np.zeros((48, 64), np.uint8)
    m[10:14, 5:60] = 1
    m[20:40, 30:33] = 1
    worst = 0.0
    for c in itertools.product((-0.2, -0.05, 0.05, 0.2), repeat=3):
        y = x + np.array(c)
        out = apply_bias_and_composite(x, y, m, color_bias(x, y, m, 7))
        worst = max(worst, float(np.abs(out - x)[m == 1].max()))
    full = np.ones((48, 64), np.uint8)
    assert not onion_ring(full, 7).any()
    empty_bias = color_bias(x, x + 0.2, full, 7)
    ok = worst <= 1e-6 and np.array_equal(empty_bias, np.zeros(3))
    verdict(7, ok, f"max error inside mask {worst:.1e} over 64 shifts; empty-ring bias {empty_bias}")
    assert ok


def test_c08_inpaint_identity_and_sparsity(tmp_path, verdict):
    rng = np.random.default_rng(8)
    img = rng.random((700, 900, 3))
    rep = tile_inpaint_report(img, np.zeros((700, 900), np.uint8), DiffusionInpainter())
    write_image(tmp_path / "a.png", img)
    write_image(tmp_path / "b.png", rep.image)
    identity = (rep.image.tobytes() == img.tobytes() and rep.tiles_processed == 0
                and (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes())

    n = 4096
    flat = np.full((n, n, 3), 0.42)
    mask = np.zeros((n, n), np.uint8)
    t = np.arange(n)
    mask[t, t] = 1
    mask[np.clip(t + 1, 0, n - 1), t] = 1
    mask[1500:1503, :] = 1
    rep = tile_inpaint_report(flat, mask, DiffusionInpainter())
    hit = sum(bool(mask[w.slices].any()) for w in gen_windows(n, n, 512, 480))
    spread = float(np.abs(rep.image - 0.42).max())
    ok = identity and rep.tiles_processed <= hit and spread <= 1 / 255
    verdict(8, ok, f"empty mask identical: {identity}; tiles processed {rep.tiles_processed} "
                   f"(intersecting {hit}, of {rep.tiles_total}); max deviation {spread:.1e}")
    assert ok


def test_c09_merge_determinism(verdict):
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        h, w = rng.integers(16, 120, size=2)
        wins, patches = [], []
        for _ in range(rng.integers(1, 30)):
            ph, pw = rng.integers(1, h + 1), rng.integers(1, w + 1)
            win = WindowSpec(int(rng.integers(0, w - pw + 1)), int(rng.integers(0, h - ph + 1)), int(pw), int(ph))
            p = rng.random((ph, pw))
            wins.append(win)
            patches.append(np.stack([1 - p, p], axis=2))
        fill = np.stack([np.ones((h, w)), np.zeros((h, w))], axis=2)
        outs = []
        for _ in range(2):
            acc = MergeAccumulator.empty(h, w)
            for i in rng.permutation(len(wins)):
                merge_patch(acc, wins[i], patches[i])
            outs.append(finalize_merge(acc, fill))
        worst = max(worst, float(np.abs(outs[0] - outs[1]).max()))
    ok = worst <= 1e-6
    verdict(9, ok, f"max abs difference {worst:.1e} over 100 layouts")
    assert ok


def test_c10_metric_identities(verdict):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(1000):
        tp, fp, fn, tn = (int(v) for v in rng.integers(0, 10**6, size=4))
        c = ConfusionCounts(tp, fp, fn, tn)
        j = iou(c)
        worst = max(worst, abs(f1(c) - 2 * j / (1 + j)))
    implied_f1 = 100 * 2 * 0.6083 / (1 + 0.6083)
    ok = worst <= 1e-9 and round(implied_f1, 2) == 75.65
    verdict(10, ok, f"max |F1 - 2IoU/(1+IoU)| {worst:.1e}; 60.83 IoU implies F1 {implied_f1:.3f}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
