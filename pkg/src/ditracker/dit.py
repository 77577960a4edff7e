"""Toy video diffusion transformer with full 3D attention.

Frames are encoded independently by a fixed stride-r patch encoder (PCA on
corpus patches, standing in for a frozen VAE), then a pre-norm transformer
attends jointly over every (frame, y, x) token. The transformer is pretrained
with flow matching and later serves as a query/key feature source for tracking.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


@dataclass
class DiTConfig:
    layers: int = 6
    heads: int = 4
    d_head: int = 32
    patch_stride: int = 4
    d_video: int = 16
    max_frames: int = 16
    lora_rank: int = 16
    extract_layer: int = 4  # 1-based
    extract_head: int = 0  # 0-based
    mlp_ratio: int = 2

    @property
    def d_model(self) -> int:
        return self.heads * self.d_head

    def validate(self) -> None:
        for name in ("layers", "heads", "d_head", "patch_stride", "d_video", "max_frames", "lora_rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"DiTConfig.{name} must be positive")
        if not 1 <= self.extract_layer <= self.layers:
            raise ValueError(f"extract_layer {self.extract_layer} outside 1..{self.layers}")
        if not 0 <= self.extract_head < self.heads:
            raise ValueError(f"extract_head {self.extract_head} outside 0..{self.heads - 1}")


@dataclass
class QKFeatures:
    Q: torch.Tensor  # (B, F, h, w, d_head)
    K: torch.Tensor
    source_layer: int
    source_head: int


def sinusoid(pos: torch.Tensor, dim: int, base: float = 100.0) -> torch.Tensor:
    half = dim // 2
    freqs = base ** (-torch.arange(half, dtype=torch.float32) / max(half, 1))
    arg = pos.float()[:, None] * freqs[None]
    out = torch.cat([arg.sin(), arg.cos()], dim=-1)
    if dim % 2:
        out = F.pad(out, (0, 1))
    return out


def factorized_pos_embed(f: int, h: int, w: int, dim: int) -> torch.Tensor:
    """(f*h*w, dim) embedding: concat of sinusoids over frame, row and column."""
    dt = dim // 4
    dy = (dim - dt) // 2
    dx = dim - dt - dy
    et = sinusoid(torch.arange(f), dt)[:, None, None].expand(f, h, w, dt)
    ey = sinusoid(torch.arange(h), dy, base=30.0)[None, :, None].expand(f, h, w, dy)
    ex = sinusoid(torch.arange(w), dx, base=30.0)[None, None, :].expand(f, h, w, dx)
    return torch.cat([et, ey, ex], dim=-1).reshape(f * h * w, dim)


class PatchEncoder(nn.Module):
    """Fixed per-frame stride-r linear patch encoder (no trainable parameters)."""

    def __init__(self, stride: int, d_video: int):
        super().__init__()
        self.stride = stride
        self.d_video = d_video
        g = torch.Generator().manual_seed(0)
        w = torch.linalg.qr(torch.randn(3 * stride * stride, d_video, generator=g))[0].T
        self.register_buffer("weight", w.reshape(d_video, 3, stride, stride).contiguous())
        self.register_buffer("bias", torch.zeros(d_video))

    @torch.no_grad()
    def fit(self, videos: torch.Tensor) -> "PatchEncoder":
        """Whitened PCA of non-overlapping r x r patches; videos (N, F, 3, H, W)."""
        r = self.stride
        x = videos.reshape(-1, *videos.shape[-3:]).double()
        patches = F.unfold(x, kernel_size=r, stride=r).transpose(1, 2).reshape(-1, 3 * r * r)
        mean = patches.mean(0)
        cov = torch.cov((patches - mean).T)
        evals, evecs = torch.linalg.eigh(cov)
        top = evecs[:, -self.d_video:].flip(-1)
        scale = (evals[-self.d_video:].flip(-1).clamp_min(1e-8)).rsqrt()
        w = (top * scale).T  # (d_video, 3 r r)
        self.weight.copy_(w.reshape(self.d_video, 3, r, r).float())
        self.bias.copy_((-(w @ mean)).float())
        return self

    def forward(self, video: torch.Tensor) -> torch.Tensor:
        """(B, F, 3, H, W) -> (B, F, h, w, d_video)."""
        b, f, c, h, w = video.shape
        r = self.stride
        if h % r or w % r:
            raise ValueError(f"frame size {h}x{w} not divisible by stride {r}")
        z = F.conv2d(video.reshape(b * f, c, h, w), self.weight.to(video.dtype), self.bias.to(video.dtype), stride=r)
        return z.reshape(b, f, self.d_video, h // r, w // r).permute(0, 1, 3, 4, 2)


class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable low-rank residual x @ A @ B (B starts at zero)."""

    def __init__(self, base: nn.Linear, rank: int):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.A = nn.Parameter(torch.randn(base.in_features, rank, dtype=base.weight.dtype) / math.sqrt(base.in_features))
        self.B = nn.Parameter(torch.zeros(rank, base.out_features, dtype=base.weight.dtype))

    def forward(self, x):
        return self.base(x) + (x @ self.A) @ self.B


class Attention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def qk(self, x):
        return self.split(self.q(x)), self.split(self.k(x))

    def forward(self, x):
        q, k = self.qk(x)
        v = self.split(self.v(x))
        out = F.scaled_dot_product_attention(q, k, v)
        b, m, n, dh = out.shape
        return self.o(out.transpose(1, 2).reshape(b, n, m * dh))


class Block(nn.Module):
    def __init__(self, d_model: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, mlp_ratio * d_model), nn.GELU(), nn.Linear(mlp_ratio * d_model, d_model)
        )

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class VideoDiT(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        self.encoder = PatchEncoder(cfg.patch_stride, cfg.d_video)
        self.in_proj = nn.Linear(cfg.d_video, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList([Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers)])
        self.ln_out = nn.LayerNorm(d)
        self.out = nn.Linear(d, cfg.d_video)

    def embed(self, z: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        b, f, h, w, _ = z.shape
        if f > self.cfg.max_frames:
            raise ValueError(f"{f} frames exceeds max_frames={self.cfg.max_frames}")
        x = self.in_proj(z.reshape(b, f * h * w, -1))
        x = x + factorized_pos_embed(f, h, w, self.cfg.d_model).to(x.dtype)
        temb = self.time_mlp(sinusoid(t * 1000.0, self.cfg.d_model, base=10000.0).to(x.dtype))
        return x + temb[:, None]

    def forward(self, z: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Velocity prediction for noisy latents z (B, F, h, w, d_video) at times t (B,)."""
        x = self.embed(z, t)
        for blk in self.blocks:
            x = blk(x)
        return self.out(self.ln_out(x)).reshape(z.shape)

    def qk_all(self, z: torch.Tensor, t: float = 0.0, upto: int | None = None) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Per-layer (Q, K) of every head, each (B, M, F*h*w, d_head), for layers 1..upto."""
        upto = self.cfg.layers if upto is None else upto
        tt = torch.full((z.shape[0],), float(t), dtype=z.dtype)
        x = self.embed(z, tt)
        out = []
        for i, blk in enumerate(self.blocks[:upto]):
            out.append(blk.attn.qk(blk.ln1(x)))
            if i + 1 < upto:
                x = blk(x)
        return out

    def qk(self, z: torch.Tensor, layer: int, head: int, t: float = 0.0) -> tuple[torch.Tensor, torch.Tensor]:
        if not 1 <= layer <= self.cfg.layers:
            raise ValueError(f"layer {layer} outside 1..{self.cfg.layers}")
        if not 0 <= head < self.cfg.heads:
            raise ValueError(f"head {head} outside 0..{self.cfg.heads - 1}")
        b, f, h, w, _ = z.shape
        q, k = self.qk_all(z, t, upto=layer)[-1]
        shape = (b, f, h, w, self.cfg.d_head)
        return q[:, head].reshape(shape), k[:, head].reshape(shape)


def video_to_tensor(video) -> torch.Tensor:
    """(F, H, W, 3) or (B, F, H, W, 3) array -> (B, F, 3, H, W) float tensor."""
    v = torch.as_tensor(np.asarray(video), dtype=torch.float32)
    if v.ndim == 4:
        v = v[None]
    return v.permute(0, 1, 4, 2, 3).contiguous()


def encode_frames(video: torch.Tensor, model: VideoDiT) -> torch.Tensor:
    """Per-frame latents (B, F, h, w, d_video); no temporal compression."""
    return model.encoder(video)


def extract_qk(latents: torch.Tensor, model: VideoDiT, layer: int, head: int, t: float = 0.0) -> QKFeatures:
    q, k = model.qk(latents, layer, head, t)
    return QKFeatures(q, k, layer, head)


# --- LoRA -------------------------------------------------------------------


def attach_lora(model: VideoDiT, rank: int, up_to_layer: int) -> VideoDiT:
    """Freeze the base and add rank-`rank` adapters to q/k/v/o of layers 1..up_to_layer (in place)."""
    if rank < 1 or rank > model.cfg.d_model:
        raise ValueError(f"LoRA rank must be in 1..{model.cfg.d_model}, got {rank}")
    if not 1 <= up_to_layer <= model.cfg.layers:
        raise ValueError(f"up_to_layer {up_to_layer} outside 1..{model.cfg.layers}")
    for p in model.parameters():
        p.requires_grad_(False)
    for blk in model.blocks[:up_to_layer]:
        for name in ("q", "k", "v", "o"):
            lin = getattr(blk.attn, name)
            if isinstance(lin, LoRALinear):
                raise ValueError("LoRA already attached")
            setattr(blk.attn, name, LoRALinear(lin, rank))
    return model


def lora_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for m in model.modules() if isinstance(m, LoRALinear) for p in (m.A, m.B)]


def base_state(model: nn.Module) -> dict[str, torch.Tensor]:
    """Snapshot of every non-adapter parameter and buffer."""
    return {k: v.detach().clone() for k, v in model.state_dict().items() if not k.endswith((".A", ".B"))}


# --- chunked extraction ------------------------------------------------------


def chunk_plan(num_frames: int, chunk_len: int) -> list[list[int]]:
    """Frame indices per chunk (0-based); every chunk after the first starts with frame 0."""
    if chunk_len < 2:
        raise ValueError(f"chunk_len must be >= 2, got {chunk_len}")
    plan = [list(range(0, min(chunk_len, num_frames)))]
    for start in range(chunk_len, num_frames, chunk_len):
        plan.append([0] + list(range(start, min(start + chunk_len, num_frames))))
    return plan


def chunked_extract(video: torch.Tensor, model: VideoDiT, chunk_len: int, layer: int | None = None,
                    head: int | None = None, t: float = 0.0) -> QKFeatures:
    """Q/K for all frames, processing chunks that share frame 0 as an anchor.

    The anchor's own features always come from the first chunk; its copies in
    later chunks are dropped.
    """
    layer = model.cfg.extract_layer if layer is None else layer
    head = model.cfg.extract_head if head is None else head
    f = video.shape[1]
    plan = chunk_plan(f, chunk_len)
    z = encode_frames(video, model)
    if len(plan) == 1:
        return extract_qk(z, model, layer, head, t)
    qs, ks = [], []
    for i, idx in enumerate(plan):
        q, k = model.qk(z[:, idx], layer, head, t)
        keep = slice(0, None) if i == 0 else slice(1, None)
        qs.append(q[:, keep])
        ks.append(k[:, keep])
    return QKFeatures(torch.cat(qs, 1), torch.cat(ks, 1), layer, head)


# --- flow-matching pretraining ----------------------------------------------


def flow_matching_pair(z0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor):
    """Interpolant z_t = (1 - t) z0 + t eps and its velocity target eps - z0."""
    tt = t.reshape(-1, *([1] * (z0.ndim - 1)))
    return (1 - tt) * z0 + tt * eps, eps - z0


def flow_matching_loss(model: VideoDiT, z0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    zt, target = flow_matching_pair(z0, eps, t)
    return F.mse_loss(model(zt, t), target)


@dataclass
class PretrainResult:
    loss_curve: list[float]
    holdout_before: float
    holdout_after: float
    steps: int
    seed: int


def encode_corpus(model: VideoDiT, videos: torch.Tensor, batch: int = 32) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([encode_frames(videos[i : i + batch], model) for i in range(0, len(videos), batch)])


def pretrain_flow_matching(model: VideoDiT, latents: torch.Tensor, steps: int = 2000, batch_size: int = 4,
                           lr: float = 3e-4, seed: int = 0, holdout: torch.Tensor | None = None,
                           log_every: int = 50, progress=None) -> PretrainResult:
    """Flow-matching training of the transformer on precomputed clean latents (N, F, h, w, d)."""
    if len(latents) == 0:
        raise ValueError("pretraining corpus is empty")
    gen = torch.Generator().manual_seed(seed)
    if holdout is None:
        holdout = latents[:batch_size]
    h_eps = torch.randn(holdout.shape, generator=gen)
    h_t = torch.rand(len(holdout), generator=gen)

    def held_out():
        model.eval()
        with torch.no_grad():
            return float(flow_matching_loss(model, holdout, h_eps, h_t))

    before = held_out()
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1))
    curve, running = [], 0.0
    model.train()
    for step in range(steps):
        idx = torch.randint(0, len(latents), (batch_size,), generator=gen)
        z0 = latents[idx]
        eps = torch.randn(z0.shape, generator=gen)
        t = torch.rand(batch_size, generator=gen)
        loss = flow_matching_loss(model, z0, eps, t)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        sched.step()
        running += loss.item()
        if (step + 1) % log_every == 0:
            curve.append(running / log_every)
            running = 0.0
            if progress:
                progress(step + 1, curve[-1])
    return PretrainResult(curve, before, held_out(), steps, seed)


# --- checkpoints --------------------------------------------------------------


def corpus_hash(videos) -> str:
    arr = np.ascontiguousarray(np.asarray(videos, dtype=np.float32))
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


def save_dit(model: VideoDiT, out_dir, seed: int = 0, steps: int = 0, corpus: str = "", extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out / "dit.pt")
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "seed": seed,
        "steps": steps,
        "corpus_hash": corpus,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_dit(ckpt_dir) -> VideoDiT:
    d = Path(ckpt_dir)
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"no DiT checkpoint at {d}")
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    model = VideoDiT(DiTConfig(**manifest["config"]))
    model.load_state_dict(torch.load(d / "dit.pt", weights_only=True))
    return model


def frozen_copy(model: VideoDiT) -> VideoDiT:
    m = copy.deepcopy(model)
    for p in m.parameters():
        p.requires_grad_(False)
    return m.eval()
