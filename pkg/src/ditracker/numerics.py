"""Deterministic numeric primitives shared by the matching and refinement code.

Each primitive has a small numpy reference version operating on a single
(H, W, C) grid, plus a batched torch version used inside the model. The torch
versions are differentiable and are tested against the numpy ones.

Conventions: integer coordinates address cell centres, x grows to the right
and y grows downward. Out-of-bounds coordinates are clamped to the border.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

NUM_FOURIER_BANDS = 8


def _as_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim == 2:
        g = g[..., None]
    if g.ndim != 3 or g.shape[0] < 1 or g.shape[1] < 1:
        raise ValueError(f"grid must be (H, W[, C]) and non-empty, got shape {g.shape}")
    return g


def bilinear_sample(grid, x: float, y: float) -> np.ndarray:
    """Sample an (H, W, C) grid at pixel coordinate (x, y).

    Coordinates are clamped to [0, W-1] x [0, H-1] before interpolation.
    """
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError(f"sample point must be finite, got ({x}, {y})")
    g = _as_grid(grid)
    h, w, _ = g.shape
    x = min(max(float(x), 0.0), w - 1.0)
    y = min(max(float(y), 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    ax, ay = x - x0, y - y0
    top = (1 - ax) * g[y0, x0] + ax * g[y0, x1]
    bottom = (1 - ax) * g[y1, x0] + ax * g[y1, x1]
    return (1 - ay) * top + ay * bottom


def interpolate_to(grid, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned cell centres (align_corners=True)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got ({out_h}, {out_w})")
    g = _as_grid(grid)
    h, w, _ = g.shape
    ys = np.zeros(out_h) if out_h == 1 else np.arange(out_h) * ((h - 1) / (out_h - 1))
    xs = np.zeros(out_w) if out_w == 1 else np.arange(out_w) * ((w - 1) / (out_w - 1))
    out = np.empty((out_h, out_w, g.shape[2]))
    for i, yy in enumerate(ys):
        for j, xx in enumerate(xs):
            out[i, j] = bilinear_sample(g, xx, yy)
    return out


def scaled_softmax(logits, scale_dim: int) -> np.ndarray:
    """softmax(logits / sqrt(scale_dim)) along the last axis."""
    v = np.asarray(logits, dtype=np.float64)
    if v.size == 0 or v.shape[-1] == 0:
        raise ValueError("scaled_softmax needs a non-empty vector")
    if scale_dim < 1:
        raise ValueError(f"scale_dim must be positive, got {scale_dim}")
    z = v / math.sqrt(scale_dim)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def fourier_encode(dx: float, dy: float, num_bands: int = NUM_FOURIER_BANDS) -> np.ndarray:
    """[dx, dy] followed by sin/cos of 2^b * dx and 2^b * dy for each band b."""
    out = [dx, dy]
    for b in range(num_bands):
        f = 2.0**b
        out += [math.sin(f * dx), math.cos(f * dx), math.sin(f * dy), math.cos(f * dy)]
    return np.asarray(out, dtype=np.float64)


def fourier_dim(num_bands: int = NUM_FOURIER_BANDS) -> int:
    return 4 * num_bands + 2


# --- batched torch versions -------------------------------------------------


def sample_points(fmap: torch.Tensor, xy: torch.Tensor) -> torch.Tensor:
    """Bilinear sampling with border clamping.

    fmap: (B, C, H, W); xy: (B, ..., 2) pixel coordinates on that map.
    Returns (B, ..., C).
    """
    b, c, h, w = fmap.shape
    lead = xy.shape[1:-1]
    pts = xy.reshape(b, 1, -1, 2)
    scale = xy.new_tensor([2.0 / max(w - 1, 1), 2.0 / max(h - 1, 1)])
    # border padding + align_corners=True == clamp to [0, W-1] x [0, H-1]
    grid = pts * scale - 1.0
    out = F.grid_sample(fmap, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out[:, :, 0].transpose(1, 2).reshape(b, *lead, c)


def resize_maps(fmap: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Corner-aligned bilinear resize of (B, C, H, W) maps."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got ({out_h}, {out_w})")
    if fmap.shape[-2:] == (out_h, out_w):
        return fmap
    return F.interpolate(fmap, size=(out_h, out_w), mode="bilinear", align_corners=True)


def fourier_encode_torch(disp: torch.Tensor, num_bands: int = NUM_FOURIER_BANDS) -> torch.Tensor:
    """disp (..., 2) -> (..., 4 * num_bands + 2), same layout as fourier_encode."""
    freqs = 2.0 ** torch.arange(num_bands, dtype=disp.dtype, device=disp.device)
    ax = disp[..., :1] * freqs
    ay = disp[..., 1:] * freqs
    bands = torch.stack([ax.sin(), ax.cos(), ay.sin(), ay.cos()], dim=-1)
    return torch.cat([disp, bands.flatten(-2)], dim=-1)
