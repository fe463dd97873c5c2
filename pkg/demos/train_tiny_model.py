#!/usr/bin/env python3
# Train the small two-branch segmenter for a few hundred steps and compare
# coarse-only output with coarse-to-fine output on held-out scenes.
# Takes a couple of minutes on one core.
import time

import numpy as np

from wirepipe import PipelineConfig, TinyConvSegmenter, segment
from wirepipe.dataset import scene_seed, synth_scene
from wirepipe.evaluation import ConfusionCounts, confusion, iou
from wirepipe.model import train_tiny

P = 128
train = [synth_scene(512, 512, seed=scene_seed(100, i)) for i in range(60)]
held = [synth_scene(512, 512, seed=scene_seed(200, i)) for i in range(10)]

model = TinyConvSegmenter(width=16, seed=0)          # lr 0.01, momentum 0.9
print("parameters:", model.n_params)

t = time.time()
logs = train_tiny(model, [(s.image, s.mask) for s in train], iters=400, p=P, seed=1,
                  callback=lambda log: log.step % 100 == 0 and print(
                      "step %4d  coarse %.4f  fine %.4f" % (log.step, log.report.loss_glo, log.report.loss_loc)))
print("trained in %.0f s" % (time.time() - t))

cfg = PipelineConfig(p_train=P, p_infer=P, alpha=0.0)
fine, coarse = ConfusionCounts(), ConfusionCounts()
for s in held:
    res = segment(s.image, model, cfg)
    fine = fine + confusion(res.mask, s.mask)
    # the coarse mask alone: what segmentation gives without any refinement
    skip = segment(s.image, model, PipelineConfig(p_train=P, p_infer=P, alpha=1.0))
    coarse = coarse + confusion(skip.mask, s.mask)

print("held-out IoU, coarse only:     %.3f" % iou(coarse))
print("held-out IoU, coarse-to-fine:  %.3f" % iou(fine))
print("all-background IoU:            %.3f" % iou(confusion(np.zeros_like(held[0].mask), held[0].mask)))
