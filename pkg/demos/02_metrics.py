"""The three tracking metrics on hand-made predictions.

delta_avg averages, over thresholds 1, 2, 4, 8 and 16 px, the share of visible
frames predicted within the threshold. AJ also counts visibility mistakes and
OA scores visibility alone.
"""
import numpy as np

from ditracker import evalkit

gt = np.zeros((1, 2, 2))
pred = np.array([[[0.5, 0.0], [0.0, 3.0]]])
per, avg = evalkit.delta_avg(pred, gt, np.ones((1, 2), bool))
print("per threshold", per, "-> delta_avg", avg)  # 50, 50, 100, 100, 100 -> 80

pred = np.array([[[3.0, 0.0], [0.0, 0.0]]])
gt_vis = np.array([[True, False]])
per, aj = evalkit.average_jaccard(pred, np.ones((1, 2)), gt, gt_vis)
print("AJ per threshold", per, "-> AJ", aj)  # the occluded frame predicted visible is a false positive
print("OA", evalkit.occlusion_accuracy(np.ones((1, 2)), gt_vis))

rng = np.random.default_rng(0)
gt = rng.uniform(0, 256, (20, 8, 2))
vis = rng.random((20, 8)) < 0.8
noisy = gt + rng.normal(0, 3, gt.shape)
print("noisy predictions:", evalkit.compute_metrics(noisy, vis.astype(float), gt, vis))
