"""Per-frame residual CNN: the fine-grained, frame-independent cost source."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(c_out)
        self.norm2 = nn.InstanceNorm2d(c_out)
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = nn.Conv2d(c_in, c_out, 1, stride=stride)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class ConvBackbone(nn.Module):
    """4 residual blocks with stride schedule 2-2-1-1 (total stride 4), 64 output channels."""

    def __init__(self, out_dim: int = 64, widths=(32, 48, 64), strides=(2, 2, 1, 1)):
        super().__init__()
        self.stride = 1
        for s in strides:
            self.stride *= s
        chans = [3, *widths, out_dim]
        self.blocks = nn.Sequential(*[ResBlock(chans[i], chans[i + 1], s) for i, s in enumerate(strides)])
        self.head = nn.Conv2d(out_dim, out_dim, 1)
        self.out_dim = out_dim

    def forward(self, video: torch.Tensor) -> torch.Tensor:
        """(B, F, 3, H, W) in [0, 1] -> (B, F, H/4, W/4, out_dim); frames processed independently."""
        b, f, c, h, w = video.shape
        if h % self.stride or w % self.stride:
            raise ValueError(f"frame size {h}x{w} not divisible by stride {self.stride}")
        x = video.reshape(b * f, c, h, w) * 2 - 1
        y = self.head(self.blocks(x))
        return y.reshape(b, f, self.out_dim, h // self.stride, w // self.stride).permute(0, 1, 3, 4, 2)


def conv_extract(video: torch.Tensor, model: ConvBackbone) -> torch.Tensor:
    return model(video)
