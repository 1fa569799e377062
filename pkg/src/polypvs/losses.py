"""Training objective: cross-entropy plus soft IoU on logits.

Both terms are applied to every side output when deep supervision is on,
otherwise only to the final map. The IoU term uses an additive smoothing
constant of 1 so empty-vs-empty frames score zero loss instead of 0/0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


def bce_from_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy, numerically safe on raw logits."""
    return F.binary_cross_entropy_with_logits(logits, target, reduction="mean")


def soft_iou_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - smoothed IoU between sigmoid(logits) and the target mask.

    Intersection and union are summed per sample, then the complement is
    averaged over the batch.
    """
    prob = torch.sigmoid(logits)
    dims = tuple(range(1, logits.dim()))
    inter = (prob * target).sum(dim=dims)
    union = (prob + target - prob * target).sum(dim=dims)
    return (1.0 - (inter + smooth) / (union + smooth)).mean()


@dataclass
class LossReport:
    total: torch.Tensor
    cross_entropy: float = 0.0
    iou: float = 0.0
    per_output: list = field(default_factory=list)


def segmentation_loss(side_logits: list[torch.Tensor], target: torch.Tensor,
                      deep_supervision: bool = True) -> LossReport:
    """Sum of (bce + soft IoU) over supervised outputs.

    ``side_logits`` runs coarse to fine; the final map is always supervised,
    the earlier ones only when ``deep_supervision`` is set.
    """
    supervised = side_logits if deep_supervision else side_logits[-1:]
    total = None
    ce_sum = 0.0
    iou_sum = 0.0
    per_output = []
    for logits in supervised:
        ce = bce_from_logits(logits, target)
        iou = soft_iou_loss(logits, target)
        term = ce + iou
        total = term if total is None else total + term
        ce_sum += float(ce.detach())
        iou_sum += float(iou.detach())
        per_output.append((float(ce.detach()), float(iou.detach())))
    return LossReport(total=total, cross_entropy=ce_sum, iou=iou_sum, per_output=per_output)
