#!/usr/bin/env python3
# Refinement threshold sweep: how many sliding windows reach the fine branch as alpha grows.
# Uses the oracle so the counts reflect the wire layout alone.
from wirepipe import OracleSegmenter, PipelineConfig, profile
from wirepipe.dataset import scene_seed, synth_scene

scenes = [synth_scene(1024, 1024, n_wires=2, seed=scene_seed(11, i)) for i in range(8)]
models = [OracleSegmenter(s.mask) for s in scenes]
cfg = PipelineConfig(p_infer=256)

rows = profile([s.image for s in scenes], models, cfg, alphas=[0, 0.005, 0.01, 0.02, 0.05, 0.1])

print("%7s %10s %10s %8s" % ("alpha", "refined", "total", "avg s"))
for r in rows:
    print("%7g %10d %10d %8.3f" % (r.alpha, r.windows_refined, r.windows_total, r.avg_s))

# a window holding a full-width wire of thickness t has wire fraction about t/256,
# so alphas above a few percent start dropping real wire windows
