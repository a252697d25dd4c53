"""Physical subnet extraction and cost accounting.

Given eval-mode (binary) gates for one expression, :func:`plan_subnet` lists
what survives, :func:`materialize` builds a standalone network from sliced
copies of the supernet weights, and :func:`profile` counts FLOPs, parameters
and wall-clock latency.
"""

from __future__ import annotations

import copy
import json
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import ops
from .gating import GateSet
from .supernet import (BatchNorm, Conv, ResidualBlock, Supernet, SupernetConfig)

FLOP_CONVENTION = ("FLOPs = 2 x multiply-accumulates of convolutions, linear layers and "
                   "attention products; normalization, activation, pooling and additions "
                   "are not counted")


@dataclass
class BlockPlan:
    kept: bool
    filters: list  # kept bottleneck filter indices (meaningful only if kept)


@dataclass
class SubnetPlan:
    blocks: list       # BlockPlan per backbone block
    sublayers: list    # bool per interaction sublayer (MHSA/FFN alternating)
    filter_counts: list = field(default_factory=list)

    def is_full(self) -> bool:
        return (all(b.kept and len(b.filters) == c for b, c in zip(self.blocks, self.filter_counts))
                and all(self.sublayers))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SubnetPlan":
        raw = json.loads(text)
        return cls([BlockPlan(bool(b["kept"]), [int(i) for i in b["filters"]]) for b in raw["blocks"]],
                   [bool(s) for s in raw["sublayers"]], [int(c) for c in raw["filter_counts"]])


def _binary(x, what: str) -> np.ndarray:
    arr = np.asarray(x.detach().cpu().numpy() if torch.is_tensor(x) else x, dtype=np.float64)
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ValueError(f"{what} must be binary eval-mode gates")
    return arr.astype(bool)


def plan_subnet(gates, cfg: SupernetConfig) -> SubnetPlan:
    """Plan for one expression from a single-row eval ``GateSet`` or a flat gate vector."""
    if isinstance(gates, GateSet):
        if gates.layer.shape[0] != 1:
            raise ValueError("plan_subnet takes the gates of a single expression")
        if gates.mode != "eval":
            raise ValueError("plan_subnet needs eval-mode gates")
        layer = _binary(gates.layer[0], "layer gates")
        filt = _binary(gates.filter[0], "filter gates")
        p = cfg.num_blocks
        block_gates, sub_gates = layer[:p], layer[p:]
    else:
        flat = _binary(np.asarray(gates).reshape(-1), "gates")
        p, nf = cfg.num_blocks, cfg.num_filter_gates
        if flat.size != p + nf + cfg.num_sublayers:
            raise ValueError(f"expected {p + nf + cfg.num_sublayers} gates, got {flat.size}")
        block_gates, filt, sub_gates = flat[:p], flat[p:p + nf], flat[p + nf:]
    if len(block_gates) != cfg.num_blocks or len(filt) != cfg.num_filter_gates:
        raise ValueError("gate vector does not match the configuration")
    blocks, offset = [], 0
    for keep, c in zip(block_gates, cfg.filter_counts):
        idx = np.flatnonzero(filt[offset:offset + c]).tolist() if keep else []
        blocks.append(BlockPlan(bool(keep), idx))
        offset += c
    return SubnetPlan(blocks, [bool(s) for s in sub_gates], list(cfg.filter_counts))


# ---------------------------------------------------------------------------
# materialization


def _slice_bn(bn: BatchNorm, idx) -> BatchNorm:
    out = BatchNorm(len(idx), bn.momentum, bn.eps)
    with torch.no_grad():
        for name in ("weight", "bias", "running_mean", "running_var"):
            getattr(out, name).copy_(getattr(bn, name)[idx])
    return out.to(bn.weight.dtype)


class PrunedBlock(nn.Module):
    """A residual block that keeps only the planned bottleneck filters."""

    def __init__(self, block: ResidualBlock, filters: list):
        super().__init__()
        idx = torch.as_tensor(filters, dtype=torch.long)
        self.shortcut = copy.deepcopy(block.shortcut)
        self.width = len(filters)
        if self.width:
            self.conv1 = Conv(1, 1, 1)
            self.conv1.weight = nn.Parameter(block.conv1.weight.detach()[idx].clone())
            self.conv1.stride, self.conv1.padding = block.conv1.stride, block.conv1.padding
            self.bn1 = _slice_bn(block.bn1, idx)
            self.conv2 = Conv(1, 1, 1)
            self.conv2.weight = nn.Parameter(block.conv2.weight.detach()[:, idx].clone())
            self.conv2.stride, self.conv2.padding = block.conv2.stride, block.conv2.padding
            self.bn2 = copy.deepcopy(block.bn2)
        else:
            # no filters left: the residual branch is BN applied to zeros
            c = block.bn2.weight.shape[0]
            with torch.no_grad():
                const = block.bn2(torch.zeros(1, c, 1, 1, dtype=block.bn2.weight.dtype))
            self.register_buffer("constant", const)
        self.stride = block.conv1.stride

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut(x)
        if self.width == 0:
            return ops.add(skip, self.constant)
        y = ops.relu(self.bn1(self.conv1(x)))
        return ops.add(skip, self.bn2(self.conv2(y)))


class Shortcut(nn.Module):
    """A dropped block that changes resolution or width: only the projection runs."""

    def __init__(self, block: ResidualBlock):
        super().__init__()
        self.shortcut = copy.deepcopy(block.shortcut)

    def forward(self, x):
        return self.shortcut(x)


class Subnet(nn.Module):
    """Standalone image path of one expression-specific subnet."""

    def __init__(self, plan: SubnetPlan, supernet: Supernet, text=None, text_mask=None):
        super().__init__()
        bb = supernet.backbone
        if len(plan.blocks) != len(bb.blocks) or len(plan.sublayers) != len(supernet.interaction.layers):
            raise ValueError("plan does not match the supernet's layer counts")
        self.stem_conv = copy.deepcopy(bb.stem_conv)
        self.stem_bn = copy.deepcopy(bb.stem_bn)
        blocks = []
        for bp, block in zip(plan.blocks, bb.blocks):
            if any(not 0 <= i < block.filters for i in bp.filters):
                raise ValueError("plan filter index outside the block's filter range")
            if bp.kept:
                blocks.append(PrunedBlock(block, bp.filters))
            elif block.shortcut is not None:
                blocks.append(Shortcut(block))
        self.blocks = nn.ModuleList(blocks)
        inter = supernet.interaction
        self.interaction_tokens = copy.deepcopy(inter)
        self.interaction_tokens.layers = nn.ModuleList()
        self.layers = nn.ModuleList(
            [copy.deepcopy(layer) for keep, layer in zip(plan.sublayers, inter.layers) if keep])
        self.head = copy.deepcopy(supernet.head)
        self.plan = plan
        if text is not None:
            self.register_buffer("text", text.detach().clone())
            self.register_buffer("text_mask", text_mask.clone())
        else:
            self.text = self.text_mask = None
        self.eval()

    def forward(self, image, text=None, text_mask=None):
        text = self.text if text is None else text
        text_mask = self.text_mask if text_mask is None else text_mask
        if text is None:
            raise ValueError("subnet needs token features (none cached)")
        x = ops.max_pool2d(ops.relu(self.stem_bn(self.stem_conv(image))), 2)
        for block in self.blocks:
            x = block(x)
        if text.shape[0] != x.shape[0]:
            text = text.expand(x.shape[0], *text.shape[1:])
            text_mask = text_mask.expand(x.shape[0], *text_mask.shape[1:])
        h, mask = self.interaction_tokens.tokens(x, text, text_mask)
        for layer in self.layers:
            h = layer(h, mask)
        return self.head(h[:, 0])


def materialize(plan: SubnetPlan, supernet: Supernet, text=None, text_mask=None) -> Subnet:
    """Sliced standalone copy of the planned subnet (no gate multiplications)."""
    if plan.filter_counts and list(plan.filter_counts) != list(supernet.cfg.filter_counts):
        raise ValueError("plan was made for a different configuration")
    return Subnet(plan, supernet, text, text_mask)


def full_plan(cfg: SupernetConfig) -> SubnetPlan:
    return SubnetPlan([BlockPlan(True, list(range(c))) for c in cfg.filter_counts],
                      [True] * cfg.num_sublayers, list(cfg.filter_counts))


# ---------------------------------------------------------------------------
# accounting


def _conv_flops(k: int, c_in: int, c_out: int, side: int) -> int:
    return 2 * k * k * c_in * c_out * side * side


def count_flops(plan: SubnetPlan, cfg: SupernetConfig, text_len: int | None = None) -> dict:
    """Analytic per-stage FLOPs of the image path under ``FLOP_CONVENTION``."""
    text_len = cfg.max_len if text_len is None else text_len
    side = (cfg.image_size + 1) // 2
    stages = {"stem": _conv_flops(3, 3, cfg.stem_width, side)}
    side //= 2
    c_in, b = cfg.stem_width, 0
    for s, (width, stride) in enumerate(zip(cfg.stage_widths, cfg.stage_strides)):
        total = 0
        for j in range(cfg.blocks_per_stage):
            st = stride if j == 0 else 1
            out_side = (side + st - 1) // st
            bp = plan.blocks[b]
            if st != 1 or c_in != width:
                total += _conv_flops(1, c_in, width, out_side)
            if bp.kept and bp.filters:
                f = len(bp.filters)
                total += _conv_flops(3, c_in, f, out_side) + _conv_flops(3, f, width, out_side)
            side, c_in, b = out_side, width, b + 1
        stages[f"stage{s + 1}"] = total
    d, hid = cfg.d_model, cfg.ffn_mult * cfg.d_model
    vis = side * side
    t = text_len + vis
    inter = 2 * c_in * d * vis + 2 * d * d * text_len
    for i, keep in enumerate(plan.sublayers):
        if not keep:
            continue
        if i % 2 == 0:
            inter += 2 * d * 3 * d * t + 2 * 2 * t * t * d + 2 * d * d * t
        else:
            inter += 2 * 2 * d * hid * t
    stages["interaction"] = inter
    h = cfg.head_hidden
    stages["head"] = 2 * (d * h + h * h + h * 4)
    return stages


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def image_path_params(supernet: Supernet) -> int:
    """Parameters of the ungated image path (excludes the token encoder)."""
    return (count_params(supernet.backbone) + count_params(supernet.interaction)
            + count_params(supernet.head))


@torch.no_grad()
def measure_latency(fn, repeats: int = 100, warmup: int = 10) -> list[float]:
    """Per-call wall-clock seconds after discarding ``warmup`` calls."""
    if repeats < 10:
        raise ValueError("latency needs at least 10 repeats")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return times


@dataclass
class ProfileReport:
    flops: int
    params: int
    latency_ms: float | None
    latency_std_ms: float | None
    repeats: int
    stages: dict
    convention: str = FLOP_CONVENTION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def profile(plan: SubnetPlan, supernet: Supernet, image=None, text=None, text_mask=None,
            repeats: int = 100, warmup: int = 10) -> ProfileReport:
    """FLOPs, parameters and (if inputs are given) latency of a planned subnet."""
    cfg = supernet.cfg
    text_len = cfg.max_len if text is None else text.shape[1]
    stages = count_flops(plan, cfg, text_len)
    subnet = materialize(plan, supernet)
    latency = std = None
    if image is not None:
        times = measure_latency(lambda: subnet(image, text, text_mask), repeats, warmup)
        latency = 1e3 * statistics.fmean(times)
        std = 1e3 * statistics.pstdev(times)
    return ProfileReport(sum(stages.values()), count_params(subnet), latency, std,
                         repeats if image is not None else 0, stages)


def profile_supernet(supernet: Supernet, image, text, text_mask, repeats: int = 100,
                     warmup: int = 10) -> ProfileReport:
    """Same report for the full ungated supernet image path."""
    cfg = supernet.cfg
    stages = count_flops(full_plan(cfg), cfg, text.shape[1])
    was = supernet.training
    supernet.eval()
    times = measure_latency(lambda: supernet.ground(image, text, text_mask), repeats, warmup)
    supernet.train(was)
    return ProfileReport(sum(stages.values()), image_path_params(supernet),
                         1e3 * statistics.fmean(times), 1e3 * statistics.pstdev(times),
                         repeats, stages)
