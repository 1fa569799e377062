"""Frame encoder: pluggable backbone + receptive field blocks.

Every backbone emits three feature maps at strides 8, 16 and 32; a receptive
field block per scale reduces each to the 32-channel contract every
downstream module relies on.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from polypvs.config import EncoderConfig
from polypvs.layers import ConvBlock


class TinyConvBackbone(nn.Module):
    """Five stride-2 convolutional stages; outputs taken at /8, /16, /32.

    Small enough to train from scratch on CPU, which is what the synthetic
    desk-scale experiments use.
    """

    def __init__(self, channels=(16, 24, 32, 48, 64)):
        super().__init__()
        c0, c1, c2, c3, c4 = channels
        self.stem = ConvBlock(3, c0, stride=2)
        self.stage1 = nn.Sequential(ConvBlock(c0, c1, stride=2), ConvBlock(c1, c1))
        self.stage2 = nn.Sequential(ConvBlock(c1, c2, stride=2), ConvBlock(c2, c2))
        self.stage3 = nn.Sequential(ConvBlock(c2, c3, stride=2), ConvBlock(c3, c3))
        self.stage4 = nn.Sequential(ConvBlock(c3, c4, stride=2), ConvBlock(c4, c4))
        self.out_channels = (c2, c3, c4)

    def forward(self, x):
        x = self.stem(x)
        x = self.stage1(x)
        f8 = self.stage2(x)
        f16 = self.stage3(f8)
        f32 = self.stage4(f16)
        return f8, f16, f32


class _SpatialReductionAttention(nn.Module):
    def __init__(self, dim, heads, sr_ratio):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, sr_ratio, stride=sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)

    def forward(self, x, h, w):
        b, n, c = x.shape
        q = self.q(x).view(b, n, self.heads, c // self.heads).transpose(1, 2)
        if self.sr_ratio > 1:
            red = x.transpose(1, 2).reshape(b, c, h, w)
            red = self.sr(red).flatten(2).transpose(1, 2)
            red = self.sr_norm(red)
        else:
            red = x
        kv = self.kv(red).view(b, -1, 2, self.heads, c // self.heads)
        k, v = kv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class _TransformerBlock(nn.Module):
    def __init__(self, dim, heads, sr_ratio, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _SpatialReductionAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x, h, w):
        x = x + self.attn(self.norm1(x), h, w)
        x = x + self.mlp(self.norm2(x))
        return x


class PvtLikeBackbone(nn.Module):
    """Four-stage pyramid transformer with strides 4, 8, 16, 32.

    Matches the stage-stride contract of pyramid vision transformers so
    externally pretrained weights of the same shape can be loaded; stages
    2-4 feed the segmentation head.
    """

    def __init__(self, dims=(32, 64, 160, 256), depths=(2, 2, 2, 2),
                 heads=(1, 2, 5, 8), sr_ratios=(8, 4, 2, 1)):
        super().__init__()
        self.embeds = nn.ModuleList()
        self.blocks = nn.ModuleList()
        self.norms = nn.ModuleList()
        in_ch = 3
        for i, dim in enumerate(dims):
            patch = 7 if i == 0 else 3
            stride = 4 if i == 0 else 2
            self.embeds.append(nn.Conv2d(in_ch, dim, patch, stride=stride, padding=patch // 2))
            self.blocks.append(nn.ModuleList(
                _TransformerBlock(dim, heads[i], sr_ratios[i]) for _ in range(depths[i])
            ))
            self.norms.append(nn.LayerNorm(dim))
            in_ch = dim
        self.out_channels = tuple(dims[1:])

    def forward(self, x):
        feats = []
        for embed, blocks, norm in zip(self.embeds, self.blocks, self.norms):
            x = embed(x)
            b, c, h, w = x.shape
            t = x.flatten(2).transpose(1, 2)
            for blk in blocks:
                t = blk(t, h, w)
            t = norm(t)
            x = t.transpose(1, 2).reshape(b, c, h, w)
            feats.append(x)
        return feats[1], feats[2], feats[3]


class ReceptiveFieldBlock(nn.Module):
    """Multi-branch dilated block squeezing a backbone feature to ``out_ch``.

    Branches: 1x1, and three 1x1 -> (1,k) -> (k,1) -> dilated 3x3 paths with
    k / dilation = 3, 5, 7; concatenated, fused by a 3x3 conv, plus a 1x1
    residual path, ReLU after the sum.
    """

    def __init__(self, in_ch, out_ch=32):
        super().__init__()
        self.branch0 = ConvBlock(in_ch, out_ch, 1, relu=False)
        self.branch1 = self._branch(in_ch, out_ch, 3)
        self.branch2 = self._branch(in_ch, out_ch, 5)
        self.branch3 = self._branch(in_ch, out_ch, 7)
        self.fuse = ConvBlock(4 * out_ch, out_ch, 3, relu=False)
        self.residual = ConvBlock(in_ch, out_ch, 1, relu=False)
        self.relu = nn.ReLU(inplace=True)

    @staticmethod
    def _branch(in_ch, out_ch, k):
        return nn.Sequential(
            ConvBlock(in_ch, out_ch, 1, relu=False),
            ConvBlock(out_ch, out_ch, (1, k), relu=False),
            ConvBlock(out_ch, out_ch, (k, 1), relu=False),
            ConvBlock(out_ch, out_ch, 3, dilation=k, relu=False),
        )

    def forward(self, x):
        cat = torch.cat(
            [self.branch0(x), self.branch1(x), self.branch2(x), self.branch3(x)], dim=1
        )
        return self.relu(self.fuse(cat) + self.residual(x))


class Encoder(nn.Module):
    """Backbone + per-scale receptive field blocks -> 3-level, 32-channel pyramid."""

    def __init__(self, cfg: EncoderConfig, feature_channels: int = 32):
        super().__init__()
        if cfg.backbone == "tiny_conv":
            self.backbone = TinyConvBackbone(tuple(cfg.tiny_channels))
        elif cfg.backbone == "pvt_like":
            self.backbone = PvtLikeBackbone(
                tuple(cfg.pvt_dims), tuple(cfg.pvt_depths),
                tuple(cfg.pvt_heads), tuple(cfg.pvt_sr_ratios))
        else:
            raise ValueError(f"unknown backbone {cfg.backbone!r}")
        self.rfb = nn.ModuleList(
            ReceptiveFieldBlock(c, feature_channels) for c in self.backbone.out_channels
        )
        self.feature_channels = feature_channels
        if cfg.pretrained:
            state = torch.load(cfg.pretrained, map_location="cpu", weights_only=True)
            self.backbone.load_state_dict(state)

    def forward(self, frames: torch.Tensor) -> list[torch.Tensor]:
        """(B, 3, H, W) -> [f/8, f/16, f/32], each (B, 32, h, w)."""
        h, w = frames.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"frame size {h}x{w} not divisible by 32")
        raws = self.backbone(frames)
        levels = []
        for i, (raw, rfb) in enumerate(zip(raws, self.rfb)):
            expect = (h // (8 << i), w // (8 << i))
            if raw.shape[-2:] != expect:
                raise ValueError(
                    f"backbone level {i} produced {tuple(raw.shape[-2:])}, expected {expect}")
            levels.append(rfb(raw))
        return levels
