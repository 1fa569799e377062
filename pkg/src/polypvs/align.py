"""Short-term temporal alignment.

The previous frame's features are warped toward the current frame by a 3x3
deformable convolution whose per-tap offsets come from a zero-initialized
1x1 conv over the concatenated pair. The pair is then fused by attention
whose keys/values live on a max-pooled token grid.

The deformable convolution is written out explicitly (bilinear sampling at
fractional tap positions, zeros outside the grid) so it runs in float64 for
gradient checks and reduces exactly to a standard convolution at zero
offsets.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def bilinear_sample(x: torch.Tensor, py: torch.Tensor, px: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` (B, C, H, W) at fractional positions (py, px), each (B, h, w).

    Positions outside the grid read as zero.
    """
    b, c, hh, ww = x.shape
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    wy = py - y0
    wx = px - x0
    flat = x.reshape(b, c, hh * ww)
    out = None
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            inside = ((yy >= 0) & (yy < hh) & (xx >= 0) & (xx < ww)).to(x.dtype)
            weight = (wy if dy else 1 - wy) * (wx if dx else 1 - wx) * inside
            yi = yy.clamp(0, hh - 1).long()
            xi = xx.clamp(0, ww - 1).long()
            idx = (yi * ww + xi).reshape(b, 1, -1).expand(b, c, -1)
            corner = flat.gather(2, idx).reshape(b, c, *py.shape[-2:])
            term = corner * weight.unsqueeze(1)
            out = term if out is None else out + term
    return out


def deform_conv3x3(x: torch.Tensor, offsets: torch.Tensor, weight: torch.Tensor,
                   bias: torch.Tensor | None = None) -> torch.Tensor:
    """3x3 deformable convolution with per-position, per-tap offsets.

    ``offsets`` is (B, 18, H, W): channels (2k, 2k+1) hold the (dy, dx)
    displacement of tap k, taps enumerated row-major over the 3x3 kernel.
    With all offsets zero this equals ``F.conv2d(x, weight, bias, padding=1)``.
    """
    b, c, h, w = x.shape
    if offsets.shape[1] != 18:
        raise ValueError(f"expected 18 offset channels, got {offsets.shape[1]}")
    if not torch.isfinite(offsets).all():
        raise ValueError("offsets contain non-finite values")
    gy, gx = torch.meshgrid(
        torch.arange(h, device=x.device, dtype=x.dtype),
        torch.arange(w, device=x.device, dtype=x.dtype),
        indexing="ij",
    )
    off = offsets.reshape(b, 9, 2, h, w)
    samples = []
    for k in range(9):
        a, bb = divmod(k, 3)
        py = gy + (a - 1) + off[:, k, 0]
        px = gx + (bb - 1) + off[:, k, 1]
        samples.append(bilinear_sample(x, py, px))
    stacked = torch.stack(samples, dim=2)  # (B, C, 9, H, W)
    out = torch.einsum("bckhw,ock->bohw", stacked, weight.reshape(weight.shape[0], c, 9))
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def pooled_attention(q_map: torch.Tensor, k_map: torch.Tensor, v_map: torch.Tensor):
    """Attention of per-pixel queries over a pooled token grid.

    q_map (B, Cq, H, W), k_map (B, Cq, hp, wp), v_map (B, Cv, hp, wp) ->
    output (B, Cv, H, W) and the (B, H*W, hp*wp) attention matrix, scaled by
    1/sqrt(Cq), rows normalized by softmax.
    """
    b, cq, h, w = q_map.shape
    q = q_map.flatten(2).transpose(1, 2)
    k = k_map.flatten(2)
    v = v_map.flatten(2).transpose(1, 2)
    attn = torch.softmax(q @ k / math.sqrt(cq), dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(b, v_map.shape[1], h, w)
    return out, attn


class ShortTermAlign(nn.Module):
    """Align the previous frame's features and fuse the pair into one map.

    Operates on a single pyramid level; the model owns one instance per level.
    """

    def __init__(self, channels: int = 32, pool_window: int = 4):
        super().__init__()
        self.channels = channels
        self.pool_window = pool_window
        # offset head starts at identity alignment
        self.offset_conv = nn.Conv2d(2 * channels, 18, 1)
        nn.init.zeros_(self.offset_conv.weight)
        nn.init.zeros_(self.offset_conv.bias)
        self.deform_weight = nn.Parameter(torch.empty(channels, channels, 3, 3))
        self.deform_bias = nn.Parameter(torch.zeros(channels))
        nn.init.kaiming_uniform_(self.deform_weight, a=math.sqrt(5))
        self.fuse_conv = nn.Conv2d(2 * channels, channels, 3, padding=1)

    def estimate_offsets(self, f_t: torch.Tensor, f_prev: torch.Tensor) -> torch.Tensor:
        if f_t.shape != f_prev.shape:
            raise ValueError(f"feature shapes differ: {tuple(f_t.shape)} vs {tuple(f_prev.shape)}")
        return self.offset_conv(torch.cat([f_t, f_prev], dim=1))

    def align_previous(self, f_prev: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
        return deform_conv3x3(f_prev, offsets, self.deform_weight, self.deform_bias)

    def fuse(self, f_t: torch.Tensor, f_prev_aligned: torch.Tensor):
        q = torch.cat([f_t, f_prev_aligned], dim=1)
        pooled = F.max_pool2d(q, self.pool_window, self.pool_window, ceil_mode=True)
        v = self.fuse_conv(pooled)
        return pooled_attention(q, pooled, v)

    def forward(self, f_t: torch.Tensor, f_prev: torch.Tensor,
                use_fusion: bool = True, use_alignment: bool = True) -> torch.Tensor:
        """``use_fusion=False`` bypasses the module; ``use_alignment=False``
        fuses the raw (unaligned) previous features."""
        if not use_fusion:
            return f_t
        if use_alignment:
            offsets = self.estimate_offsets(f_t, f_prev)
            f_prev = self.align_previous(f_prev, offsets)
        fused, _ = self.fuse(f_t, f_prev)
        return fused
