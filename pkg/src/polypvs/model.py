"""Network assembly and causal per-frame streaming.

Each frame passes encoder -> short-term fusion with the previous frame's
pyramid -> long-term memory readout -> decoder. A StreamState carries
everything the next frame needs: the previous pyramid, one memory bank per
scale, and the frame counter. The prediction at index t is a function of
frames 0..t only; nothing reads ahead.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
import torch.nn as nn

from .align import ShortTermAlign
from .config import ModelConfig, validate_config
from .decoder import SegmentationDecoder
from .encoder import Encoder
from .layers import area_downsample
from .memory import MemoryBank, MemoryReadout, maybe_insert


N_SCALES = 3

# config fields toggled by each ablation variant
ABLATION_VARIANTS = {
    "full": {},
    "no_short_term": {"use_short_term": False},
    "no_long_term": {"use_long_term": False},
    "frame_only": {"use_short_term": False, "use_long_term": False},
    "no_alignment": {"use_alignment": False},
    "no_masking": {"use_mask_attention": False},
}


def apply_variant(cfg: ModelConfig, variant: str) -> ModelConfig:
    if variant not in ABLATION_VARIANTS:
        raise ValueError(
            f"unknown variant {variant!r}; known: {', '.join(sorted(ABLATION_VARIANTS))}")
    return replace(cfg, **ABLATION_VARIANTS[variant])


@dataclass
class MaskPrediction:
    frame_index: int
    logits: torch.Tensor          # (B, 1, H, W)
    probability: torch.Tensor     # (B, 1, H, W)
    side_logits: list = field(default_factory=list)


class StreamState:
    """Mutable per-stream context: previous pyramid, banks, frame counter."""

    def __init__(self, capacity: int):
        self.prev_pyramid = None
        self.banks = [MemoryBank(capacity) for _ in range(N_SCALES)]
        self.frame_index = 0

    def state_dict(self) -> dict:
        pyramid = None
        if self.prev_pyramid is not None:
            pyramid = [f.detach().clone() for f in self.prev_pyramid]
        return {
            "frame_index": self.frame_index,
            "prev_pyramid": pyramid,
            "banks": [b.state_dict() for b in self.banks],
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "StreamState":
        out = cls(state["banks"][0]["capacity"])
        out.frame_index = state["frame_index"]
        if state["prev_pyramid"] is not None:
            out.prev_pyramid = [f.clone() for f in state["prev_pyramid"]]
        out.banks = [MemoryBank.from_state_dict(b) for b in state["banks"]]
        return out


class VideoSegModel(nn.Module):
    """Online video segmentation model over a three-level feature pyramid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        validate_config(cfg)
        self.cfg = cfg
        c = cfg.feature_channels
        self.encoder = Encoder(cfg.encoder, feature_channels=c)
        self.short_term = nn.ModuleList(
            ShortTermAlign(c, pool_window=cfg.attention_pool_window)
            for _ in range(N_SCALES))
        self.long_term = nn.ModuleList(
            MemoryReadout(c, cfg.key_channels, cfg.value_channels)
            for _ in range(N_SCALES))
        self.decoder = SegmentationDecoder(c)

    def new_stream(self) -> StreamState:
        return StreamState(self.cfg.memory_capacity)

    def step(self, frame: torch.Tensor, state: StreamState,
             update_state: bool = True):
        """Advance one frame; returns (MaskPrediction, state).

        ``frame`` is a preprocessed (B, 3, H, W) batch at the configured
        input size. State mutation can be suppressed for probing.
        """
        cfg = self.cfg
        if frame.dim() != 4 or frame.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) frame, got {tuple(frame.shape)}")
        if tuple(frame.shape[-2:]) != tuple(cfg.input_size):
            raise ValueError(
                f"frame size {tuple(frame.shape[-2:])} does not match "
                f"configured input size {tuple(cfg.input_size)}")
        t = state.frame_index
        feats = self.encoder(frame)
        prev = state.prev_pyramid if state.prev_pyramid is not None else feats

        fused = []
        for lvl in range(N_SCALES):
            fused.append(self.short_term[lvl](
                feats[lvl], prev[lvl],
                use_fusion=cfg.use_short_term,
                use_alignment=cfg.use_alignment))

        keys, values, per_scale_rel = [], [], []
        if cfg.use_long_term:
            long_feats = []
            for lvl in range(N_SCALES):
                long_f, key, value, rel = self.long_term[lvl](
                    fused[lvl], state.banks[lvl],
                    use_masking=cfg.use_mask_attention)
                long_feats.append(long_f)
                keys.append(key)
                values.append(value)
                if rel is not None:
                    per_scale_rel.append(rel)
        else:
            long_feats = fused

        side_logits = self.decoder(long_feats, frame.shape[-2:])
        logits = side_logits[-1]
        probability = torch.sigmoid(logits)

        if update_state:
            if cfg.use_long_term:
                relevance = None
                if per_scale_rel:
                    relevance = torch.stack(per_scale_rel).mean(dim=0)
                for lvl in range(N_SCALES):
                    mask = area_downsample(probability, feats[lvl].shape[-2:])
                    maybe_insert(state.banks[lvl], keys[lvl], values[lvl], mask,
                                 t, cfg.memory_stride, relevance)
            detach = cfg.train.detach_previous or not self.training
            state.prev_pyramid = [f.detach() for f in feats] if detach else feats
            state.frame_index = t + 1

        return MaskPrediction(t, logits, probability, side_logits), state

    def forward(self, window: torch.Tensor) -> list:
        """Run a (B, T, 3, H, W) training window through a fresh stream.

        Returns the per-frame lists of side logits, in frame order.
        """
        if window.dim() != 5:
            raise ValueError(f"expected (B, T, 3, H, W), got {tuple(window.shape)}")
        state = self.new_stream()
        outputs = []
        for t in range(window.shape[1]):
            pred, state = self.step(window[:, t], state)
            outputs.append(pred.side_logits)
        return outputs


def infer_stream(model: VideoSegModel, frames, state: StreamState = None):
    """Causal inference: yields a MaskPrediction per incoming frame."""
    was_training = model.training
    model.eval()
    if state is None:
        state = model.new_stream()
    try:
        with torch.no_grad():
            for frame in frames:
                pred, state = model.step(frame, state)
                yield pred
    finally:
        if was_training:
            model.train()
