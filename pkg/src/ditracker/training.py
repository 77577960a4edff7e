"""Tracking losses and the supervised training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .dit import video_to_tensor
from .evalkit import EVAL_SIZE
from .refiner import TrackEstimate, Tracker


@dataclass
class LossConfig:
    huber_threshold: float = 6.0
    occluded_weight: float = 0.2
    gamma: float = 0.8
    conf_radius: float = 12.0
    # the training loop measures pixels in a frame_size x frame_size frame (as evaluation does);
    # None keeps native pixels
    frame_size: int | None = EVAL_SIZE


def gamma_weights(T: int, gamma: float = 0.8) -> list[float]:
    """Iteration weights gamma^(T-t) for t = 1..T."""
    return [gamma ** (T - t) for t in range(1, T + 1)]


def huber(err_sq: torch.Tensor, threshold: float = 6.0) -> torch.Tensor:
    """Huber of the Euclidean error given its square: 0.5 e^2 inside, threshold * (e - threshold / 2) outside."""
    lin = threshold * (torch.sqrt(err_sq.clamp_min(threshold**2)) - threshold / 2)
    return torch.where(err_sq <= threshold**2, 0.5 * err_sq, lin)


def _check(estimates, gt_xy, gt_vis):
    if not estimates:
        raise ValueError("no estimates")
    if estimates[0].P.shape[:-1] != gt_vis.shape or gt_xy.shape != estimates[0].P.shape:
        raise ValueError(f"estimate shape {tuple(estimates[0].P.shape)} does not match ground truth {tuple(gt_xy.shape)}")


def track_loss(estimates: list[TrackEstimate], gt_xy: torch.Tensor, gt_vis: torch.Tensor,
               cfg: LossConfig = LossConfig()) -> torch.Tensor:
    _check(estimates, gt_xy, gt_vis)
    one = gt_xy.new_ones(gt_vis.shape)
    w = torch.where(gt_vis.bool(), one, one * cfg.occluded_weight)
    total = gt_xy.new_zeros(())
    for g, est in zip(gamma_weights(len(estimates), cfg.gamma), estimates):
        err_sq = ((est.P - gt_xy) ** 2).sum(-1)
        total = total + g * (w * huber(err_sq, cfg.huber_threshold)).mean()
    return total


def vis_loss(estimates: list[TrackEstimate], gt_xy: torch.Tensor, gt_vis: torch.Tensor,
             cfg: LossConfig = LossConfig()) -> torch.Tensor:
    _check(estimates, gt_xy, gt_vis)
    target = gt_vis.to(gt_xy.dtype)
    return sum(g * F.binary_cross_entropy_with_logits(est.V, target)
               for g, est in zip(gamma_weights(len(estimates), cfg.gamma), estimates))


def conf_labels(P: torch.Tensor, gt_xy: torch.Tensor, radius: float = 12.0) -> torch.Tensor:
    return (torch.linalg.norm(P.detach() - gt_xy, dim=-1) < radius).to(gt_xy.dtype)


def conf_loss(estimates: list[TrackEstimate], gt_xy: torch.Tensor, gt_vis: torch.Tensor,
              cfg: LossConfig = LossConfig()) -> torch.Tensor:
    _check(estimates, gt_xy, gt_vis)
    return sum(g * F.binary_cross_entropy_with_logits(est.C, conf_labels(est.P, gt_xy, cfg.conf_radius))
               for g, est in zip(gamma_weights(len(estimates), cfg.gamma), estimates))


def to_frame(estimates: list[TrackEstimate], gt_xy: torch.Tensor, height: int, width: int, size: int | None):
    """Rescale predicted and ground-truth positions from a height x width frame to size x size."""
    if size is None:
        return estimates, gt_xy
    s = gt_xy.new_tensor([size / width, size / height])
    return [TrackEstimate(e.P * s, e.V, e.C, e.iteration) for e in estimates], gt_xy * s


def total_loss(estimates, gt_xy, gt_vis, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    return track_loss(estimates, gt_xy, gt_vis, cfg) + vis_loss(estimates, gt_xy, gt_vis, cfg) + \
        conf_loss(estimates, gt_xy, gt_vis, cfg)


# --- query sampling -----------------------------------------------------------


def sample_queries(xy: np.ndarray, vis: np.ndarray, n: int, rng: np.random.Generator):
    """Pick up to n tracks and a visible query frame each, favouring early frames.

    Returns (queries (n, 3) as (t, x, y), track indices).
    """
    num, f = vis.shape
    idx = rng.choice(num, size=n, replace=num < n)
    early = np.exp(-np.arange(f) / max(f / 2, 1))
    q = np.zeros((n, 3), dtype=np.float32)
    for k, i in enumerate(idx):
        p = early * vis[i]
        t = rng.choice(f, p=p / p.sum())
        q[k] = (t, *xy[i, t])
    return q, idx


def first_visible_queries(xy: np.ndarray, vis: np.ndarray) -> np.ndarray:
    t = vis.argmax(axis=1)
    return np.concatenate([t[:, None], xy[np.arange(len(xy)), t]], axis=1).astype(np.float32)


# --- training loop ------------------------------------------------------------


@dataclass
class TrainSchedule:
    steps: int = 2000
    lr: float = 3e-4
    batch_size: int = 1
    queries_per_clip: int = 16
    grad_clip: float = 1.0
    log_every: int = 50
    probe_clips: int = 4


@dataclass
class TrainResult:
    loss_curve: list[float] = field(default_factory=list)
    probe_before: float = math.nan
    probe_after: float = math.nan
    steps: int = 0


def trainable_parameters(tracker: Tracker) -> list[torch.nn.Parameter]:
    return [p for p in tracker.parameters() if p.requires_grad]


def make_batch(clips, rng: np.random.Generator, n_queries: int):
    videos, queries, gxy, gvis = [], [], [], []
    for clip in clips:
        xy, vis = clip.track_arrays()
        q, idx = sample_queries(xy, vis, n_queries, rng)
        videos.append(video_to_tensor(clip.video))
        queries.append(torch.as_tensor(q))
        gxy.append(torch.as_tensor(xy[idx]))
        gvis.append(torch.as_tensor(vis[idx]))
    return torch.cat(videos), torch.stack(queries), torch.stack(gxy), torch.stack(gvis)


def framed_loss(estimates, xy, vis, hw, cfg: LossConfig) -> torch.Tensor:
    est, gt = to_frame(estimates, xy, hw[0], hw[1], cfg.frame_size)
    return total_loss(est, gt, vis, cfg)


def probe_loss(tracker: Tracker, probe, cfg: LossConfig) -> float:
    tracker.eval()
    with torch.no_grad():
        total = 0.0
        for video, q, xy, vis in probe:
            total += float(framed_loss(tracker(video, q), xy, vis, video.shape[-2:], cfg))
    tracker.train()
    return total / max(len(probe), 1)


def train(tracker: Tracker, clips, schedule: TrainSchedule = TrainSchedule(), seed: int = 0,
          loss_cfg: LossConfig = LossConfig(), progress=None) -> TrainResult:
    """Optimise adapters, conv backbone, cost MLP and refiner on the summed loss.

    Frozen base-DiT weights never change (they have requires_grad=False).
    """
    if not clips:
        raise ValueError("training corpus is empty")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    probe_rng = np.random.default_rng(seed + 10_000)
    probe = [make_batch([c], probe_rng, schedule.queries_per_clip) for c in clips[: schedule.probe_clips]]
    result = TrainResult(probe_before=probe_loss(tracker, probe, loss_cfg))
    params = trainable_parameters(tracker)
    opt = torch.optim.AdamW(params, lr=schedule.lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(schedule.steps, 1))
    tracker.train()
    running = 0.0
    for step in range(schedule.steps):
        batch_idx = rng.choice(len(clips), size=schedule.batch_size, replace=False)
        video, q, xy, vis = make_batch([clips[i] for i in batch_idx], rng, schedule.queries_per_clip)
        loss = framed_loss(tracker(video, q), xy, vis, video.shape[-2:], loss_cfg)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, schedule.grad_clip)
        opt.step()
        sched.step()
        running += loss.item()
        if (step + 1) % schedule.log_every == 0:
            result.loss_curve.append(running / schedule.log_every)
            running = 0.0
            if progress:
                progress(step + 1, result.loss_curve[-1])
    result.steps = schedule.steps
    result.probe_after = probe_loss(tracker, probe, loss_cfg)
    tracker.eval()
    return result
