"""Box losses and the gate/expression mutual-information term."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from . import ops

LN2 = math.log(2.0)


@dataclass
class LossConfig:
    giou_weight: float = 1.0
    mi_weight: float = 0.1

    def __post_init__(self):
        if self.giou_weight < 0 or self.mi_weight < 0:
            raise ValueError("loss weights must be non-negative")


def cxcywh_to_xyxy(b):
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], -1)


def xyxy_to_cxcywh(b):
    x0, y0, x1, y1 = b.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], -1)


def box_iou(a, b):
    """IoU of corner-form boxes, elementwise over leading dims."""
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    area_a = (a[..., 2:] - a[..., :2]).prod(-1)
    area_b = (b[..., 2:] - b[..., :2]).prod(-1)
    union = area_a + area_b - inter
    return torch.where(union > 0, inter / torch.where(union > 0, union, torch.ones_like(union)),
                       torch.zeros_like(union))


def generalized_iou(a, b):
    """GIoU of corner-form boxes and a flag for fully degenerate pairs.

    A pair with zero union and zero enclosure gets GIoU 0.
    """
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    area_a = (a[..., 2:] - a[..., :2]).prod(-1)
    area_b = (b[..., 2:] - b[..., :2]).prod(-1)
    union = area_a + area_b - inter
    enc_lt = torch.minimum(a[..., :2], b[..., :2])
    enc_rb = torch.maximum(a[..., 2:], b[..., 2:])
    enclosure = (enc_rb - enc_lt).clamp(min=0).prod(-1)
    ok_u = union > 0
    ok_c = enclosure > 0
    iou = torch.where(ok_u, inter / torch.where(ok_u, union, torch.ones_like(union)),
                      torch.zeros_like(union))
    slack = torch.where(ok_c, (enclosure - union) / torch.where(ok_c, enclosure, torch.ones_like(enclosure)),
                        torch.zeros_like(enclosure))
    degenerate = ~ok_u & ~ok_c
    return iou - slack, degenerate


def l1_loss(pred, gt):
    """Sum of absolute coordinate errors, averaged over the batch."""
    return ops.mean(ops.sum_((pred - gt).abs(), -1))


def giou_loss(pred, gt, return_flags: bool = False):
    """Mean of ``1 - GIoU`` for cxcywh boxes."""
    g, flags = generalized_iou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt))
    loss = ops.mean(1.0 - g)
    return (loss, flags) if return_flags else loss


def binary_entropy(p):
    """Entropy in nats with ``0 ln 0 = 0``; gradient-safe at the ends."""
    eps = torch.finfo(p.dtype).eps
    q = p.clamp(eps, 1.0 - eps)
    h = -(q * torch.log(q) + (1 - q) * torch.log1p(-q))
    return torch.where((p <= 0) | (p >= 1), torch.zeros_like(h), h)


@dataclass
class MIBatchEstimate:
    marginal: torch.Tensor       # per-gate batch mean of soft gates
    marginal_entropy: torch.Tensor
    conditional_entropy: torch.Tensor
    per_gate: torch.Tensor
    value: torch.Tensor          # mean over gates


def mutual_information(soft):
    """Batch estimate of I(G; expression) from soft gates of shape (B, G)."""
    if soft.dim() != 2 or soft.shape[0] < 2:
        raise ValueError(f"mutual information needs (B >= 2, G) soft gates, got {tuple(soft.shape)}")
    if bool(((soft < 0) | (soft > 1)).any()):
        raise ValueError("soft gates must lie in [0, 1]")
    marginal = soft.mean(0)
    h_marginal = binary_entropy(marginal)
    h_cond = binary_entropy(soft).mean(0)
    per_gate = h_marginal - h_cond
    return MIBatchEstimate(marginal, h_marginal, h_cond, per_gate, per_gate.mean())


@dataclass
class LossTerms:
    l1: torch.Tensor
    giou: torch.Tensor
    mi: torch.Tensor
    total: torch.Tensor

    def row(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("l1", "giou", "mi", "total")}


def total_loss(pred, gt, soft, cfg: LossConfig | None = None) -> LossTerms:
    """``L1 + w_giou * GIoU loss - w_mi * I``."""
    cfg = cfg or LossConfig()
    l1 = l1_loss(pred, gt)
    gl = giou_loss(pred, gt)
    mi = mutual_information(soft).value
    return LossTerms(l1, gl, mi, l1 + cfg.giou_weight * gl - cfg.mi_weight * mi)
