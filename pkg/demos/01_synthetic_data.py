"""Synthetic clips: render one, inspect its tracks, strata and corruptions.

Writes demos/out/clip/ (the on-disk clip layout) and demos/out/corruptions.png.
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from ditracker import datagen

out = Path(__file__).parent / "out"
cfg = datagen.GeneratorConfig()
clip = datagen.generate_clip(cfg, seed=7)
print(f"video {clip.video.shape}, {len(clip.tracks)} tracks")

# identical seeds give identical clips, bit for bit
again = datagen.generate_clip(cfg, seed=7)
assert np.array_equal(clip.video, again.video)

xy, vis = clip.track_arrays()
print(f"visible fraction {vis.mean():.2f}; first track visibility {vis[0].astype(int).tolist()}")
diag = float(np.hypot(cfg.height, cfg.width))
labels = [datagen.stratify(t, diag) for t in clip.tracks]
for name in datagen.MOTION_BINS:
    print(f"motion {name}: {sum(l.motion_bin == name for l in labels)} tracks")

datagen.save_clip(clip, out / "clip")
print(f"saved {out / 'clip'} (frames/*.png, tracks.jsonl, meta.json)")

fig, axes = plt.subplots(len(datagen.CORRUPTIONS), 5, figsize=(10, 6))
for row, kind in enumerate(datagen.CORRUPTIONS):
    for sev in range(1, 6):
        ax = axes[row, sev - 1]
        ax.imshow(datagen.corrupt(clip.video, kind, sev, seed=0)[3])
        ax.set_axis_off()
        ax.set_title(f"{kind} {sev}", fontsize=7)
fig.savefig(out / "corruptions.png", dpi=100, bbox_inches="tight", metadata={"Software": None})
print(f"wrote {out / 'corruptions.png'}")
