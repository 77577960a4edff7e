"""Matching costs: global attention costs and argmax tracking, multi-scale local
4D costs from either backbone, cost fusion and the cost-embedding MLP.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .numerics import bilinear_sample, resize_maps, sample_points, scaled_softmax

FUSION_MODES = ("none", "feature_concat", "cost_sum", "cost_concat")


@dataclass
class PyramidConfig:
    num_scales: int = 3
    radius: int = 3
    stride: int = 4

    def __post_init__(self):
        if self.num_scales < 1 or self.radius < 0 or self.stride < 1:
            raise ValueError(f"invalid pyramid config {self}")

    @property
    def window(self) -> int:
        return (2 * self.radius + 1) ** 2


@dataclass
class LocalCostVolume:
    """Per-scale cost tensors of shape (..., L) with L = (2r+1)^4, doubled when fused."""

    scales: list[torch.Tensor]
    radius: int
    source: str  # "dit", "conv" or "fused"
    extras: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.scales[0].shape[-1]


# --- global cost and zero-shot tracking ---------------------------------------


def global_cost(Q: torch.Tensor, K: torch.Tensor, i: int, j: int) -> torch.Tensor:
    """Row-stochastic (h*w, h*w) cost between frame i queries and frame j keys.

    Q, K: (F, h, w, d) for a single clip.
    """
    f, h, w, d = Q.shape
    if not (0 <= i < f and 0 <= j < f):
        raise ValueError(f"frame indices ({i}, {j}) outside 0..{f - 1}")
    logits = Q[i].reshape(h * w, d) @ K[j].reshape(h * w, d).T
    return torch.softmax(logits / math.sqrt(d), dim=-1)


def pixel_to_cell(p: float, stride: float) -> float:
    """Pixel coordinate -> latent cell coordinate (cell c covers pixels [c*s, c*s + s))."""
    return (p - (stride - 1) / 2) / stride


def cell_to_pixel(c, stride: float):
    return np.asarray(c, dtype=np.float64) * stride + (stride - 1) / 2


def zero_shot_track(Q: torch.Tensor, K: torch.Tensor, start: tuple[float, float], out_h: int, out_w: int,
                    query_frame: int = 0) -> np.ndarray:
    """Argmax tracking of one point through every frame; returns (F, 2) pixel positions.

    The query position is kept verbatim; other frames take the argmax cell of the
    query row of the cost (smallest row-major index on ties) mapped to pixels.
    """
    return zero_shot_tracks(Q, K, np.asarray([start], dtype=np.float64), out_h, out_w,
                            np.asarray([query_frame]))[0]


def zero_shot_tracks(Q: torch.Tensor, K: torch.Tensor, starts: np.ndarray, out_h: int, out_w: int,
                     query_frames: np.ndarray | None = None) -> np.ndarray:
    """Vectorised zero_shot_track for N points: starts (N, 2) -> (N, F, 2)."""
    f, h, w, d = Q.shape
    starts = np.asarray(starts, dtype=np.float64)
    n = len(starts)
    qf = np.zeros(n, dtype=int) if query_frames is None else np.asarray(query_frames, dtype=int)
    # frame extent covers whole pixels: [-0.5, W - 0.5] x [-0.5, H - 0.5]
    if np.any((starts[:, 0] < -0.5) | (starts[:, 0] > out_w - 0.5) | (starts[:, 1] < -0.5) | (starts[:, 1] > out_h - 0.5)):
        raise ValueError("start point outside the frame")
    sx, sy = out_w / w, out_h / h
    cx = np.clip(np.rint(pixel_to_cell(starts[:, 0], sx)), 0, w - 1).astype(int)
    cy = np.clip(np.rint(pixel_to_cell(starts[:, 1], sy)), 0, h - 1).astype(int)
    Qn = Q.detach().double().cpu().numpy()
    Kn = K.detach().double().cpu().numpy().reshape(f, h * w, d)
    qvec = Qn[qf, cy, cx]  # (N, d)
    # softmax is strictly monotone per row, so argmax of logits == argmax of cost
    logits = np.einsum("nd,fpd->nfp", qvec, Kn)
    idx = logits.argmax(axis=-1)  # first maximum -> smallest row-major index
    out = np.stack([cell_to_pixel(idx % w, sx), cell_to_pixel(idx // w, sy)], axis=-1)
    out[np.arange(n), qf] = starts
    return out


def sweep_layers_heads(model, clips, queries_per_clip: int | None = None, eval_size: int = 256):
    """Zero-shot delta_avg for every (layer, head) of a DiT over a set of clips.

    Returns (grid (L, M) numpy array, (best_layer 1-based, best_head 0-based)).
    Tracks use their first visible frame as query and are scored on later frames
    in a eval_size x eval_size coordinate frame.
    """
    from .dit import encode_frames, video_to_tensor
    from .evalkit import delta_avg, query_first_mask

    cfg = model.cfg
    L, M = cfg.layers, cfg.heads
    preds = {(l, m): [] for l in range(L) for m in range(M)}
    gts, viss, masks = [], [], []
    model.eval()
    for clip in clips:
        xy, vis = clip.track_arrays()
        if queries_per_clip is not None:
            xy, vis = xy[:queries_per_clip], vis[:queries_per_clip]
        f, H, W, _ = clip.video.shape
        qf = vis.argmax(axis=1)
        starts = xy[np.arange(len(xy)), qf]
        with torch.no_grad():
            z = encode_frames(video_to_tensor(clip.video), model)
            qk = model.qk_all(z)
        h, w = H // cfg.patch_stride, W // cfg.patch_stride
        for l, (q, k) in enumerate(qk):
            for m in range(M):
                Qm = q[0, m].reshape(f, h, w, -1)
                Km = k[0, m].reshape(f, h, w, -1)
                preds[(l, m)].append(zero_shot_tracks(Qm, Km, starts, H, W, qf) * [eval_size / W, eval_size / H])
        gts.append(xy * [eval_size / W, eval_size / H])
        viss.append(vis)
        masks.append(query_first_mask(vis))
    gt = np.concatenate(gts)
    gv = np.concatenate(viss)
    mk = np.concatenate(masks)
    grid = np.zeros((L, M))
    for (l, m), p in preds.items():
        grid[l, m] = delta_avg(np.concatenate(p), gt, gv, mk)[1]
    best = np.unravel_index(np.argmax(grid), grid.shape)
    return grid, (int(best[0]) + 1, int(best[1]))


def write_sweep(grid: np.ndarray, out_dir, heatmap: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["layer", "head", "delta_avg"])
        for l in range(grid.shape[0]):
            for m in range(grid.shape[1]):
                wr.writerow([l + 1, m, f"{grid[l, m]:.4f}"])
    if heatmap:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 4))
        im = ax.imshow(grid, cmap="viridis")
        ax.set_xlabel("head")
        ax.set_ylabel("layer")
        ax.set_yticks(range(grid.shape[0]), [str(i + 1) for i in range(grid.shape[0])])
        fig.colorbar(im, ax=ax, label="delta_avg")
        fig.savefig(out / "sweep.png", dpi=100, bbox_inches="tight", metadata={"Software": None})
        plt.close(fig)
    return out / "sweep.csv"


# --- local 4D costs -------------------------------------------------------------


def window_offsets(radius: int, dtype=torch.float32) -> torch.Tensor:
    """(P, 2) integer (dx, dy) offsets, row-major over (dy, dx)."""
    r = torch.arange(-radius, radius + 1, dtype=dtype)
    dy, dx = torch.meshgrid(r, r, indexing="ij")
    return torch.stack([dx.reshape(-1), dy.reshape(-1)], dim=-1)


def sample_local(grid, center: tuple[float, float], radius: int, scale: int, stride: int) -> np.ndarray:
    """Reference window sampling on one (h_s, w_s, d) map; returns (d, (2r+1)^2)."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    div = stride * 2 ** (scale - 1)
    cx, cy = center[0] / div, center[1] / div
    cols = [bilinear_sample(grid, cx + dx, cy + dy)
            for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return np.stack(cols, axis=1)


def sample_windows(maps: torch.Tensor, centers: torch.Tensor, radius: int, divisor: float) -> torch.Tensor:
    """maps (B, d, h, w); centers (B, N, 2) in input pixels -> (B, N, P, d)."""
    offs = window_offsets(radius, centers.dtype).to(centers.device)
    pts = centers[:, :, None, :] / divisor + offs  # (B, N, P, 2)
    return sample_points(maps, pts)


def local_cost(q_patch: torch.Tensor, k_patch: torch.Tensor, scale_dim: int) -> torch.Tensor:
    """Local 4D cost: per query-offset row softmax of q k^T / sqrt(scale_dim), flattened.

    q_patch, k_patch: (..., P, d). Output (..., P*P), query offset outer, key offset inner.
    """
    if q_patch.shape[-2:] != k_patch.shape[-2:]:
        raise ValueError(f"patch shapes differ: {tuple(q_patch.shape)} vs {tuple(k_patch.shape)}")
    logits = q_patch @ k_patch.transpose(-1, -2) / math.sqrt(scale_dim)
    return torch.softmax(logits, dim=-1).flatten(-2)


def local_cost_reference(q_patch: np.ndarray, k_patch: np.ndarray, scale_dim: int) -> np.ndarray:
    """numpy version taking (d, P) patches as produced by sample_local."""
    if q_patch.shape != k_patch.shape:
        raise ValueError("patch shapes differ")
    return scaled_softmax(q_patch.T @ k_patch, scale_dim).reshape(-1)


def fuse_costs(dit: LocalCostVolume, conv: LocalCostVolume) -> LocalCostVolume:
    """Concatenate flattened costs per scale, DiT block first."""
    if len(dit.scales) != len(conv.scales) or dit.radius != conv.radius:
        raise ValueError("cost volumes differ in scale count or radius")
    out = []
    for a, b in zip(dit.scales, conv.scales):
        if a.shape != b.shape:
            raise ValueError(f"cost shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        out.append(torch.cat([a, b], dim=-1))
    return LocalCostVolume(out, dit.radius, "fused")


def sum_costs(dit: LocalCostVolume, conv: LocalCostVolume) -> LocalCostVolume:
    """Average of the two sources (the cost-sum ablation arm)."""
    return LocalCostVolume([(a + b) / 2 for a, b in zip(dit.scales, conv.scales)], dit.radius, "fused")


def build_pyramid(fmap: torch.Tensor, num_scales: int) -> list[torch.Tensor]:
    """(B, F, h, w, d) -> list over scales of (B, F, d, h_s, w_s), h_s = h / 2^(s-1)."""
    b, f, h, w, d = fmap.shape
    base = fmap.permute(0, 1, 4, 2, 3).reshape(b * f, d, h, w)
    out = []
    for s in range(num_scales):
        hs, ws = max(1, h // 2**s), max(1, w // 2**s)
        out.append(resize_maps(base, hs, ws).reshape(b, f, d, hs, ws))
    return out


def pyramid_costs(pyr_q: list[torch.Tensor], pyr_k: list[torch.Tensor], queries: torch.Tensor,
                  positions: torch.Tensor, cfg: PyramidConfig, source: str,
                  query_windows: list[torch.Tensor] | None = None):
    """Local costs at every scale for a batch of tracks.

    pyr_q / pyr_k: per-scale (B, F, d, h_s, w_s); queries (B, N, 3) as (t, x, y);
    positions (B, N, F, 2) current estimates. Query windows can be passed in to
    reuse them across iterations. Returns (LocalCostVolume with scales of shape
    (B, N, F, P*P), query windows).
    """
    b, n, f, _ = positions.shape
    t = queries[..., 0].long()
    costs, qwins = [], []
    for s, (mq, mk) in enumerate(zip(pyr_q, pyr_k)):
        div = cfg.stride * 2**s
        d, hs, ws = mq.shape[2:]
        if query_windows is None:
            qmaps = mq[torch.arange(b)[:, None], t]  # (B, N, d, hs, ws)
            qw = sample_windows(qmaps.reshape(b * n, d, hs, ws), queries[..., 1:].reshape(b * n, 1, 2),
                                cfg.radius, div).reshape(b, n, 1, cfg.window, d)
        else:
            qw = query_windows[s]
        kc = positions.permute(0, 2, 1, 3).reshape(b * f, n, 2)
        kw = sample_windows(mk.reshape(b * f, d, hs, ws), kc, cfg.radius, div)
        kw = kw.reshape(b, f, n, cfg.window, d).permute(0, 2, 1, 3, 4)
        costs.append(local_cost(qw, kw, d))
        qwins.append(qw)
    return LocalCostVolume(costs, cfg.radius, source), qwins


class CostEmbedder(nn.Module):
    """2-layer GELU MLP from the concatenated per-scale costs to a d_E embedding."""

    def __init__(self, num_scales: int, per_scale_len: int, d_embed: int = 128, hidden: int = 256):
        super().__init__()
        self.num_scales = num_scales
        self.in_dim = num_scales * per_scale_len
        self.net = nn.Sequential(nn.Linear(self.in_dim, hidden), nn.GELU(), nn.Linear(hidden, d_embed))

    def forward(self, volume: LocalCostVolume) -> torch.Tensor:
        return embed_costs(volume, self)


def embed_costs(volume: LocalCostVolume, mlp: CostEmbedder) -> torch.Tensor:
    if len(volume.scales) != mlp.num_scales:
        raise ValueError(f"expected {mlp.num_scales} scales, got {len(volume.scales)}")
    # softmax entries are ~1/window; rescale so a uniform row reads as ones
    window = (2 * volume.radius + 1) ** 2
    return mlp.net(torch.cat(volume.scales, dim=-1) * window)
