"""Segmentation head.

A partial decoder aggregates the three pyramid features into one coarse
global map at 1/8 resolution. Three reverse-attention branches then refine
it coarse-to-fine: each erases the already-confident region, re-examines
the remainder of its feature map, and adds a residual correction.

The last conv of every reverse-attention branch starts at zero, so each
branch is an identity refinement at init and the cascade cannot hurt the
global map before it has learned anything.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .layers import ConvBlock, resize_to


class PartialDecoder(nn.Module):
    """Upsample-multiply-concat aggregation of three 32-channel scales.

    Inputs run shallow to deep: [f8, f16, f32]. Output is a single-channel
    logit map at the f8 resolution.
    """

    def __init__(self, channels: int = 32):
        super().__init__()
        c = channels
        self.up1 = ConvBlock(c, c)
        self.up2 = ConvBlock(c, c)
        self.up3 = ConvBlock(c, c)
        self.up4 = ConvBlock(c, c)
        self.up5 = ConvBlock(2 * c, 2 * c)
        self.cat2 = ConvBlock(2 * c, 2 * c)
        self.cat3 = ConvBlock(3 * c, 3 * c)
        self.fuse = ConvBlock(3 * c, 3 * c)
        self.head = nn.Conv2d(3 * c, 1, 1)

    def forward(self, f8: torch.Tensor, f16: torch.Tensor, f32: torch.Tensor) -> torch.Tensor:
        size16 = f16.shape[-2:]
        size8 = f8.shape[-2:]
        x1 = f32
        x2 = self.up1(resize_to(x1, size16)) * f16
        x3 = self.up2(resize_to(x1, size8)) * self.up3(resize_to(f16, size8)) * f8
        x2 = self.cat2(torch.cat([x2, self.up4(resize_to(x1, size16))], dim=1))
        x3 = self.cat3(torch.cat([x3, self.up5(resize_to(x2, size8))], dim=1))
        return self.head(self.fuse(x3))


class ReverseAttentionBranch(nn.Module):
    """Residual refinement of a coarser logit map at one scale."""

    def __init__(self, channels: int = 32, depth: int = 2):
        super().__init__()
        self.body = nn.Sequential(*[ConvBlock(channels, channels) for _ in range(depth)])
        self.head = nn.Conv2d(channels, 1, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, feature: torch.Tensor, coarse_logits: torch.Tensor) -> torch.Tensor:
        coarse = resize_to(coarse_logits, feature.shape[-2:])
        attention = 1.0 - torch.sigmoid(coarse)
        residual = self.head(self.body(attention * feature))
        return residual + coarse


class SegmentationDecoder(nn.Module):
    """Partial decoder plus the coarse-to-fine reverse-attention cascade.

    forward returns side logits [global, refine32, refine16, refine8], all
    bilinearly upsampled to ``output_size``; the last entry is the final
    prediction.
    """

    def __init__(self, channels: int = 32):
        super().__init__()
        self.aggregate = PartialDecoder(channels)
        self.refine32 = ReverseAttentionBranch(channels)
        self.refine16 = ReverseAttentionBranch(channels)
        self.refine8 = ReverseAttentionBranch(channels)

    def forward(self, features: list[torch.Tensor], output_size) -> list[torch.Tensor]:
        f8, f16, f32 = features
        coarse = self.aggregate(f8, f16, f32)
        r32 = self.refine32(f32, coarse)
        r16 = self.refine16(f16, r32)
        r8 = self.refine8(f8, r16)
        return [resize_to(m, output_size) for m in (coarse, r32, r16, r8)]
