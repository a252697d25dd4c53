"""Supernet plus gating network: the full trainable model."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .gating import GateSet, GatingNetwork, PoolingResult, RelevanceScores, make_gates
from .supernet import Supernet, SupernetConfig


@dataclass
class Output:
    boxes: torch.Tensor
    gates: GateSet
    pooling: PoolingResult
    scores: RelevanceScores


class GroundingModel(nn.Module):
    def __init__(self, cfg: SupernetConfig, granularity: str = "gate"):
        super().__init__()
        self.cfg = cfg
        self.supernet = Supernet(cfg)
        self.gating = GatingNetwork(cfg)
        self.granularity = granularity

    def gates(self, text, mask, mode: str, rng=None):
        pooling, scores = self.gating(text, mask)
        return make_gates(scores, mode, rng, self.granularity), pooling, scores

    def forward(self, image, ids, mask, mode: str = "eval", rng=None) -> Output:
        """Gate-conditioned grounding. ``mode`` selects noisy mixed gates or hard gates."""
        text = self.supernet.text(ids, mask)
        gates, pooling, scores = self.gates(text, mask, mode, rng)
        boxes = self.supernet.ground(image, text, mask, gates.layer, gates.filter)
        return Output(boxes, gates, pooling, scores)

    def param_groups(self):
        """(backbone + token encoder params, everything else)."""
        slow_ids = {id(p) for m in (self.supernet.backbone, self.supernet.text)
                    for p in m.parameters()}
        slow = [p for p in self.parameters() if id(p) in slow_ids]
        fast = [p for p in self.parameters() if id(p) not in slow_ids]
        return slow, fast
