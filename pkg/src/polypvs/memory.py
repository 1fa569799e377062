"""Long-term memory interaction.

A per-scale bank stores (key, value, mask) triples from past frames. The
current frame's key retrieves from mask-weighted memory keys by L2
similarity (negative squared distance); the softmax-normalized affinity
mixes memory values, and the result is concatenated with the current value.

Bank entries are detached when inserted, so gradients never flow into
history. One bank belongs to exactly one stream.
"""

from __future__ import annotations

import logging
import math

import torch
import torch.nn as nn

logger = logging.getLogger(__name__)


class MemoryBank:
    """Bounded, ordered store of (key, value, mask) entries for one scale."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.keys: list[torch.Tensor] = []
        self.values: list[torch.Tensor] = []
        self.masks: list[torch.Tensor] = []
        self.frame_indices: list[int] = []
        self.n_evictions = 0

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def is_empty(self) -> bool:
        return not self.keys

    @property
    def last_insert_index(self):
        return self.frame_indices[-1] if self.frame_indices else None

    def insert(self, key: torch.Tensor, value: torch.Tensor, mask: torch.Tensor,
               frame_index: int, relevance=None) -> None:
        """Append an entry, evicting the least relevant one when full.

        Ties in relevance break toward the oldest entry. Entries are stored
        detached.
        """
        if self.keys and key.shape[-2:] != self.keys[0].shape[-2:]:
            raise ValueError(
                f"entry spatial shape {tuple(key.shape[-2:])} does not match "
                f"bank shape {tuple(self.keys[0].shape[-2:])}")
        if len(self.keys) >= self.capacity:
            self.evict(self.select_victim(relevance))
        self.keys.append(key.detach())
        self.values.append(value.detach())
        self.masks.append(mask.detach())
        self.frame_indices.append(frame_index)

    def select_victim(self, relevance) -> int:
        if relevance is None:
            raise ValueError("bank is full and no relevance scores were provided")
        rel = torch.as_tensor(relevance).reshape(-1)
        if rel.numel() != len(self.keys):
            raise ValueError(
                f"relevance length {rel.numel()} does not match bank size {len(self.keys)}")
        # argmin returns the first minimum; list order is insertion order, so
        # ties fall on the oldest entry
        return int(torch.argmin(rel).item())

    def evict(self, index: int) -> None:
        logger.debug("evicting memory entry %d (frame %d)", index, self.frame_indices[index])
        del self.keys[index], self.values[index], self.masks[index], self.frame_indices[index]
        self.n_evictions += 1

    def stacked(self):
        """(keys, values, masks) stacked along a new entry dim: (B, C, n, h, w)."""
        return (
            torch.stack(self.keys, dim=2),
            torch.stack(self.values, dim=2),
            torch.stack(self.masks, dim=2),
        )

    def state_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "keys": [k.clone() for k in self.keys],
            "values": [v.clone() for v in self.values],
            "masks": [m.clone() for m in self.masks],
            "frame_indices": list(self.frame_indices),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "MemoryBank":
        bank = cls(state["capacity"])
        bank.keys = [k.clone() for k in state["keys"]]
        bank.values = [v.clone() for v in state["values"]]
        bank.masks = [m.clone() for m in state["masks"]]
        bank.frame_indices = list(state["frame_indices"])
        return bank


def maybe_insert(bank: MemoryBank, key, value, mask, frame_index: int,
                 stride: int, relevance=None) -> MemoryBank:
    """Insert only on frame indices divisible by ``stride``; returns the bank."""
    if frame_index % stride == 0:
        bank.insert(key, value, mask, frame_index, relevance)
    return bank


def masked_readout(q_key: torch.Tensor, q_value: torch.Tensor, bank: MemoryBank,
                   use_masking: bool = True):
    """Rebuild the current feature from memory.

    q_key (B, Ck, h, w), q_value (B, Cv, h, w). Memory keys are weighted by
    their stored masks (broadcast over channels) unless ``use_masking`` is
    off. Similarity between 8-dim key vectors is -||q - k||^2, scaled by
    1/sqrt(Ck) and softmax-normalized over all n*h*w memory positions.

    Returns (long_feature (B, 2*Cv, h, w), affinity (B, h*w, n*h*w)).
    """
    if bank.is_empty:
        raise ValueError("cannot read from an empty memory bank")
    b, ck, h, w = q_key.shape
    mk, mv, mm = bank.stacked()
    if mk.shape[-2:] != (h, w):
        raise ValueError(
            f"query spatial shape {(h, w)} does not match bank shape {tuple(mk.shape[-2:])}")
    if use_masking:
        mk = mk * mm
    mk = mk.reshape(b, ck, -1)                     # (B, Ck, n*h*w)
    mv = mv.reshape(b, mv.shape[1], -1)            # (B, Cv, n*h*w)
    qk = q_key.reshape(b, ck, -1)                  # (B, Ck, h*w)
    q_sq = qk.pow(2).sum(1).unsqueeze(2)           # (B, h*w, 1)
    k_sq = mk.pow(2).sum(1).unsqueeze(1)           # (B, 1, n*h*w)
    dot = qk.transpose(1, 2) @ mk                  # (B, h*w, n*h*w)
    similarity = -(q_sq - 2 * dot + k_sq)
    affinity = torch.softmax(similarity / math.sqrt(ck), dim=-1)
    read = torch.bmm(mv, affinity.transpose(1, 2)).reshape(b, -1, h, w)
    return torch.cat([q_value, read], dim=1), affinity


def relevance_from_affinity(affinity: torch.Tensor, n_entries: int) -> torch.Tensor:
    """Per-entry relevance: mean affinity mass over queries, batch and the
    entry's own spatial positions. Length equals the bank size."""
    b, nq, nm = affinity.shape
    if nm % n_entries:
        raise ValueError(f"affinity width {nm} not divisible by {n_entries} entries")
    per_entry = affinity.reshape(b, nq, n_entries, nm // n_entries)
    return per_entry.mean(dim=(0, 1, 3)).detach()


class MemoryReadout(nn.Module):
    """Key/value projection plus the masked readout for one scale."""

    def __init__(self, in_channels: int = 32, key_channels: int = 8,
                 value_channels: int = 16):
        super().__init__()
        self.key_channels = key_channels
        self.value_channels = value_channels
        self.kv_proj = nn.Conv2d(in_channels, key_channels + value_channels, 3, padding=1)

    def project(self, feature: torch.Tensor):
        """Split one projection into (key, value)."""
        kv = self.kv_proj(feature)
        return kv[:, : self.key_channels], kv[:, self.key_channels:]

    def forward(self, feature: torch.Tensor, bank: MemoryBank, use_masking: bool = True):
        """Returns (long_feature, key, value, relevance).

        On an empty bank the readout is bootstrapped as concat[value, value]
        and relevance is None.
        """
        key, value = self.project(feature)
        if bank.is_empty:
            return torch.cat([value, value], dim=1), key, value, None
        long_feat, affinity = masked_readout(key, value, bank, use_masking)
        relevance = relevance_from_affinity(affinity, len(bank))
        return long_feat, key, value, relevance
