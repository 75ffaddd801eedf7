"""Render a synthetic event-camera scene and stack it into model input.

Run:  python demos/events_to_frames.py
"""
import numpy as np

from mvheat import SyntheticSceneConfig, stack_events, synth_generate
from mvheat.events import frames_to_input

cfg = SyntheticSceneConfig(height=48, width=48, min_objects=2, max_objects=2, seed=3)
stream, labels = synth_generate(cfg)
print(f"{len(stream)} events over {cfg.duration_ms:.0f} ms")
for ann in labels[0][1]:
    print(f"  class {ann.cls}: box {np.round(ann.box, 1)}")

# Five time bins per polarity give a 10-channel frame.
frames = stack_events(stream, 0, int(cfg.duration_ms * 1000), 5, cfg.height, cfg.width)
x = frames_to_input(frames.counts, clip=8.0)
print("input shape", x.shape, "value range", (float(x.min()), float(x.max())))

# Collapse time and polarity into a coarse ASCII picture of the scene.
activity = frames.counts.reshape(-1, cfg.height, cfg.width).sum(axis=0)
levels = " .:*#"
step = 2
for row in activity[::step]:
    cells = row[::step]
    print("".join(levels[min(int(c), len(levels) - 1)] for c in cells))
