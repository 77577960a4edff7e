"""Zero-shot tracking from DiT attention: pretrain, sweep layers/heads, compare with random.

Uses the cached desk-scale pretrained model when present (see reproduce_all.py),
otherwise trains it (about 35 minutes on one core). Pass a step count to
pretrain a smaller model instead, e.g. ``python demos/03_zero_shot.py 300``.
"""
import sys
from pathlib import Path

import numpy as np
import torch

from ditracker import dit, experiments, matching

out = Path(__file__).parent / "out"
proto = experiments.DeskProtocol()
if len(sys.argv) > 1:
    proto = experiments.DeskProtocol(train_clips=128, pretrain_steps=int(sys.argv[1]))
model, manifest = experiments.pretrained_dit(proto, log=print)
print(f"held-out velocity MSE {manifest['holdout_before']:.3f} -> {manifest['holdout_after']:.3f}")

grid = np.asarray(manifest["sweep_grid"])
matching.write_sweep(grid, out / "sweep")
layer, head = manifest["selected"]
print(f"sweep: best layer {layer} head {head} (delta_avg {grid.max():.1f}); heatmap in {out / 'sweep'}")

held = experiments.clips(experiments.DeskProtocol.ZEROSHOT_SEED0, 20)
rand = experiments.random_dit(model)
pre = experiments.zero_shot_scores(model, held, layer, head)["delta_avg"]
rnd = experiments.zero_shot_scores(rand, held, layer, head)["delta_avg"]
print(f"zero-shot delta_avg on 20 held-out clips: pretrained {pre:.1f}, random init {rnd:.1f}")

# the attention cost between two frames is a row-stochastic matrix
clip = held[0]
with torch.no_grad():
    qk = dit.extract_qk(dit.encode_frames(dit.video_to_tensor(clip.video), model), model, layer, head)
C = matching.global_cost(qk.Q[0], qk.K[0], 0, 4)
print(f"cost 0->4: shape {tuple(C.shape)}, row sums {C.sum(-1).min():.4f}..{C.sum(-1).max():.4f}")
