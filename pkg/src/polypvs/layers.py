"""Small shared building blocks."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def _group_count(channels: int, preferred: int = 8) -> int:
    for g in range(min(preferred, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class ConvBlock(nn.Module):
    """conv -> GroupNorm -> optional ReLU.

    GroupNorm keeps the block free of cross-sample and running state, so the
    network stays deterministic in streams and batch-size independent.
    """

    def __init__(self, in_ch, out_ch, kernel_size=3, padding=None, dilation=1,
                 stride=1, relu=True):
        super().__init__()
        if padding is None:
            if isinstance(kernel_size, tuple):
                padding = tuple(k // 2 for k in kernel_size)
            else:
                padding = dilation * (kernel_size // 2)
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride,
                              padding=padding, dilation=dilation)
        self.norm = nn.GroupNorm(_group_count(out_ch), out_ch)
        self.relu = nn.ReLU(inplace=True) if relu else None

    def forward(self, x):
        x = self.norm(self.conv(x))
        if self.relu is not None:
            x = self.relu(x)
        return x


def resize_to(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize to an exact (h, w); identity when already there."""
    if x.shape[-2:] == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def area_downsample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Area (average) resampling, used to carry masks down to feature scales."""
    if x.shape[-2:] == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="area")
