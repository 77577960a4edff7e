"""Iterative trajectory refinement and the end-to-end tracker.

Each iteration resamples local costs around the current positions, embeds
them, builds one token per (track, frame) and lets a transformer with
alternating time / query-point attention predict residual updates of
position, visibility logit and confidence logit.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import matching
from .conv import ConvBackbone
from .dit import (
    CHECKPOINT_VERSION,
    DiTConfig,
    VideoDiT,
    attach_lora,
    chunked_extract,
    video_to_tensor,
)
from .numerics import NUM_FOURIER_BANDS, fourier_dim, fourier_encode_torch


@dataclass
class TrackerConfig:
    num_scales: int = 3
    radius: int = 3
    iters: int = 4
    fusion: str = "cost_concat"  # none | feature_concat | cost_sum | cost_concat
    use_lora: bool = True
    lora_rank: int = 16
    chunk_len: int = 16
    d_embed: int = 128
    mlp_hidden: int = 256
    width: int = 256
    heads: int = 4
    blocks: int = 3
    conv_dim: int = 64
    num_bands: int = NUM_FOURIER_BANDS

    def validate(self) -> None:
        if self.fusion not in matching.FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}; expected one of {matching.FUSION_MODES}")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")

    @property
    def token_dim(self) -> int:
        return 2 * fourier_dim(self.num_bands) + 2 + self.d_embed


@dataclass
class TrackEstimate:
    P: torch.Tensor  # (B, N, F, 2) pixels
    V: torch.Tensor  # (B, N, F) visibility logits
    C: torch.Tensor  # (B, N, F) confidence logits
    iteration: int = 0


def init_tracks(queries: torch.Tensor, num_frames: int) -> TrackEstimate:
    """Broadcast each query (t, x, y) position to every frame; zero logits."""
    if queries.ndim == 2:
        queries = queries[None]
    t = queries[..., 0]
    if num_frames < 1 or (t < 0).any() or (t >= num_frames).any():
        raise ValueError(f"query frame outside 0..{num_frames - 1}")
    b, n, _ = queries.shape
    P = queries[..., None, 1:].expand(b, n, num_frames, 2).clone()
    zeros = queries.new_zeros(b, n, num_frames)
    return TrackEstimate(P, zeros, zeros.clone(), 0)


def assemble_tokens(est: TrackEstimate, embeddings: torch.Tensor, num_bands: int = NUM_FOURIER_BANDS) -> torch.Tensor:
    """Tokens [eta(P_i - P_{i-1}), eta(P_{i+1} - P_i), V_i, C_i, E_i]; missing sides use zero displacement."""
    b, n, f, _ = est.P.shape
    if embeddings.shape[:3] != (b, n, f):
        raise ValueError(f"embeddings {tuple(embeddings.shape[:3])} do not match tracks {(b, n, f)}")
    # in units of 2^(bands-1) pixels, so the finest band turns one radian per pixel instead of aliasing
    step = (est.P[:, :, 1:] - est.P[:, :, :-1]) / 2 ** (num_bands - 1)
    pad = est.P.new_zeros(b, n, 1, 2)
    prev = fourier_encode_torch(torch.cat([pad, step], dim=2), num_bands)
    nxt = fourier_encode_torch(torch.cat([step, pad], dim=2), num_bands)
    return torch.cat([prev, nxt, est.V[..., None], est.C[..., None], embeddings], dim=-1)


class _MHA(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):  # (batch, seq, dim)
        b, s, d = x.shape
        q, k, v = self.qkv(x).view(b, s, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, s, d))


class _AttnBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = _MHA(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class RefinerHead(nn.Module):
    """Alternating attention over time (within a track) and over tracks (within a frame)."""

    def __init__(self, token_dim: int, width: int = 256, heads: int = 4, blocks: int = 3, pos_scale: float = 1.0):
        super().__init__()
        self.width = width
        self.pos_scale = pos_scale  # position updates are predicted in units of pos_scale pixels
        self.inp = nn.Linear(token_dim, width)
        self.time_blocks = nn.ModuleList([_AttnBlock(width, heads) for _ in range(blocks)])
        self.point_blocks = nn.ModuleList([_AttnBlock(width, heads) for _ in range(blocks)])
        self.ln = nn.LayerNorm(width)
        self.out = nn.Linear(width, 4)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def time_embedding(self, f: int, dtype) -> torch.Tensor:
        half = self.width // 2
        freqs = 100.0 ** (-torch.arange(half, dtype=torch.float64) / half)
        arg = torch.arange(f, dtype=torch.float64)[:, None] * freqs
        return torch.cat([arg.sin(), arg.cos()], dim=-1).to(dtype)

    def forward(self, tokens: torch.Tensor):
        """tokens (B, N, F, D) -> (dP (B,N,F,2), dV (B,N,F), dC (B,N,F))."""
        b, n, f, _ = tokens.shape
        x = self.inp(tokens) + self.time_embedding(f, tokens.dtype)
        for tb, pb in zip(self.time_blocks, self.point_blocks):
            x = tb(x.reshape(b * n, f, -1)).reshape(b, n, f, -1)
            x = x.permute(0, 2, 1, 3).reshape(b * f, n, -1)
            x = pb(x).reshape(b, f, n, -1).permute(0, 2, 1, 3)
        d = self.out(self.ln(x))
        return d[..., :2] * self.pos_scale, d[..., 2], d[..., 3]


def refine_step(tokens: torch.Tensor, head: RefinerHead):
    return head(tokens)


class Tracker(nn.Module):
    """DiT query/key costs (+ optional conv costs) -> cost MLP -> iterative refiner."""

    def __init__(self, dit: VideoDiT, cfg: TrackerConfig, conv: ConvBackbone | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dit = dit
        needs_conv = cfg.fusion != "none"
        if needs_conv and conv is None:
            conv = ConvBackbone(out_dim=cfg.conv_dim)
        self.conv = conv if needs_conv else None
        self.pyr = matching.PyramidConfig(cfg.num_scales, cfg.radius, dit.cfg.patch_stride)
        per_scale = (2 * cfg.radius + 1) ** 4 * (2 if cfg.fusion == "cost_concat" else 1)
        self.cost_mlp = matching.CostEmbedder(cfg.num_scales, per_scale, cfg.d_embed, cfg.mlp_hidden)
        self.refiner = RefinerHead(cfg.token_dim, cfg.width, cfg.heads, cfg.blocks, pos_scale=dit.cfg.patch_stride)

    @property
    def layer(self) -> int:
        return self.dit.cfg.extract_layer

    @property
    def head(self) -> int:
        return self.dit.cfg.extract_head

    def dit_trainable(self) -> bool:
        return any(p.requires_grad for p in self.dit.parameters())

    def features(self, video: torch.Tensor):
        """Per-source pyramids (pyr_q, pyr_k) keyed by 'dit' / 'conv' / 'cat'."""
        with torch.set_grad_enabled(torch.is_grad_enabled() and self.dit_trainable()):
            qk = chunked_extract(video, self.dit, self.cfg.chunk_len, self.layer, self.head)
        S = self.cfg.num_scales
        out = {}
        phi = self.conv(video) if self.conv is not None else None
        if self.cfg.fusion == "feature_concat":
            out["cat"] = (matching.build_pyramid(torch.cat([qk.Q, phi], -1), S),
                          matching.build_pyramid(torch.cat([qk.K, phi], -1), S))
            return out
        out["dit"] = (matching.build_pyramid(qk.Q, S), matching.build_pyramid(qk.K, S))
        if phi is not None:
            p = matching.build_pyramid(phi, S)
            out["conv"] = (p, p)
        return out

    def costs(self, feats, queries, positions, cache):
        vols = {}
        for name, (pq, pk) in feats.items():
            vols[name], cache[name] = matching.pyramid_costs(pq, pk, queries, positions, self.pyr, name, cache.get(name))
        if self.cfg.fusion == "cost_concat":
            return matching.fuse_costs(vols["dit"], vols["conv"])
        if self.cfg.fusion == "cost_sum":
            return matching.sum_costs(vols["dit"], vols["conv"])
        return next(iter(vols.values()))

    def forward(self, video: torch.Tensor, queries: torch.Tensor, iters: int | None = None,
                on_sample=None) -> list[TrackEstimate]:
        """video (B, F, 3, H, W); queries (B, N, 3) rows (t, x, y). Returns estimates for iterations 1..T."""
        iters = self.cfg.iters if iters is None else iters
        if iters < 1:
            raise ValueError("iters must be >= 1")
        if queries.numel() == 0:
            raise ValueError("no query points")
        feats = self.features(video)
        est = init_tracks(queries.to(video.dtype), video.shape[1])
        cache: dict = {}
        history = []
        for it in range(iters):
            if on_sample is not None:
                on_sample(it, est.P.detach().clone())
            vol = self.costs(feats, queries, est.P, cache)
            emb = matching.embed_costs(vol, self.cost_mlp)
            dP, dV, dC = refine_step(assemble_tokens(est, emb, self.cfg.num_bands), self.refiner)
            est = TrackEstimate(est.P + dP, est.V + dV, est.C + dC, it + 1)
            history.append(est)
        return history


def build_tracker(pretrained_dit: VideoDiT, cfg: TrackerConfig, seed: int = 0) -> Tracker:
    """Fresh tracker around a copy of a pretrained DiT (LoRA attached or fully frozen)."""
    torch.manual_seed(seed)
    dit = copy.deepcopy(pretrained_dit)
    if cfg.use_lora:
        attach_lora(dit, cfg.lora_rank, dit.cfg.extract_layer)
    else:
        for p in dit.parameters():
            p.requires_grad_(False)
    return Tracker(dit, cfg)


def track(video, tracker: Tracker, queries, iters: int | None = None) -> dict:
    """Run the tracker on one clip. video (F, H, W, 3) in [0, 1]; queries (N, 3) rows (t, x, y).

    Returns numpy arrays: xy (N, F, 2), vis / conf probabilities (N, F), and the
    per-iteration positions under "xy_iters" (T, N, F, 2).
    """
    q = np.asarray(queries, dtype=np.float32)
    if q.size == 0:
        raise ValueError("no query points")
    tracker.eval()
    with torch.no_grad():
        hist = tracker(video_to_tensor(video), torch.as_tensor(q)[None], iters)
    last = hist[-1]
    return {
        "xy": last.P[0].numpy(),
        "vis": torch.sigmoid(last.V[0]).numpy(),
        "conf": torch.sigmoid(last.C[0]).numpy(),
        "xy_iters": np.stack([h.P[0].numpy() for h in hist]),
    }


def write_predictions(path, queries, result: dict) -> Path:
    """tracks_pred.jsonl: one record per query with xy, vis and conf per frame."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for i, q in enumerate(np.asarray(queries)):
            rec = {
                "id": i,
                "query": [int(q[0]), round(float(q[1]), 4), round(float(q[2]), 4)],
                "xy": np.round(result["xy"][i].astype(np.float64), 4).tolist(),
                "vis": np.round(result["vis"][i].astype(np.float64), 6).tolist(),
                "conf": np.round(result["conf"][i].astype(np.float64), 6).tolist(),
            }
            fh.write(json.dumps(rec) + "\n")
    return path


def read_predictions(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"prediction file not found: {path}")
    recs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    return sorted(recs, key=lambda r: r["id"])


# --- checkpoints --------------------------------------------------------------


def save_tracker(tracker: Tracker, out_dir, seed: int = 0, steps: int = 0, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(tracker.state_dict(), out / "tracker.pt")
    manifest = {
        "version": CHECKPOINT_VERSION,
        "dit_config": asdict(tracker.dit.cfg),
        "tracker_config": asdict(tracker.cfg),
        "seed": seed,
        "steps": steps,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_tracker(ckpt_dir) -> Tracker:
    d = Path(ckpt_dir)
    if not (d / "tracker.pt").exists():
        raise FileNotFoundError(f"no tracker checkpoint at {d}")
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    cfg = TrackerConfig(**manifest["tracker_config"])
    tracker = build_tracker(VideoDiT(DiTConfig(**manifest["dit_config"])), cfg)
    tracker.load_state_dict(torch.load(d / "tracker.pt", weights_only=True))
    return tracker.eval()
