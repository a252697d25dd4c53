"""Language-conditioned gate generation.

Each candidate layer (backbone block or interaction sublayer) pools the
token features with its own learned query, maps the pooled vector to a
layer relevance score (and, for backbone blocks, one score per bottleneck
filter), and turns scores into binary gates with Logistic noise and a
random soft/hard mix during training.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import ops
from .supernet import SupernetConfig, _xavier

GRANULARITIES = ("gate", "batch")


@dataclass
class PoolingResult:
    alpha: torch.Tensor   # (B, K, L), zero on pads
    pooled: torch.Tensor  # (B, K, d)


@dataclass
class RelevanceScores:
    layer: torch.Tensor   # (B, P + 2M)
    filter: torch.Tensor  # (B, sum c_i)
    num_blocks: int = 0


@dataclass
class GateSet:
    """Realized gates plus the soft values the MI term consumes."""

    layer: torch.Tensor
    filter: torch.Tensor
    soft_layer: torch.Tensor
    soft_filter: torch.Tensor
    mode: str
    num_blocks: int

    @property
    def soft(self) -> torch.Tensor:
        return torch.cat([self.soft_layer, self.soft_filter], -1)

    def flat(self) -> torch.Tensor:
        """Gates in export order: block layers, block filters, interaction sublayers."""
        p = self.num_blocks
        return torch.cat([self.layer[:, :p], self.filter, self.layer[:, p:]], -1)

    def row(self, i: int) -> "GateSet":
        sl = slice(i, i + 1)
        return GateSet(self.layer[sl], self.filter[sl], self.soft_layer[sl], self.soft_filter[sl],
                       self.mode, self.num_blocks)

    def detach(self) -> "GateSet":
        return GateSet(self.layer.detach(), self.filter.detach(), self.soft_layer.detach(),
                       self.soft_filter.detach(), self.mode, self.num_blocks)


def gate_names(cfg: SupernetConfig) -> list[str]:
    """Column names matching ``GateSet.flat`` order."""
    names = [f"block{i}" for i in range(cfg.num_blocks)]
    for i, c in enumerate(cfg.filter_counts):
        names += [f"block{i}.f{j}" for j in range(c)]
    for i in range(cfg.interaction_layers):
        names += [f"inter{i}.mhsa", f"inter{i}.ffn"]
    return names


# ---------------------------------------------------------------------------
# scoring


def pool(features, mask, embeddings) -> PoolingResult:
    """Attention pooling of token features, one query per candidate layer.

    ``features``: (B, L, d); ``mask``: (B, L) bool; ``embeddings``: (K, d).
    """
    if embeddings.shape[-1] != features.shape[-1]:
        raise ops.ShapeError("pool", "embedding width differs from features",
                             embeddings.shape, features.shape)
    if not bool(mask.any(-1).all()):
        raise ValueError("pool: every expression needs at least one valid token")
    logits = ops.matmul(embeddings, features.transpose(1, 2))          # (B, K, L)
    alpha = ops.softmax(logits, -1, mask[:, None, :])
    return PoolingResult(alpha, ops.matmul(alpha, features))


def relevance(pooled, reduce_w, layer_w, filter_ws: Sequence[torch.Tensor]) -> RelevanceScores:
    """``r_L = W2 gelu(W1 h)`` for every candidate, ``r_C = W3 gelu(W1 h)`` for blocks.

    ``reduce_w``: (K, d_h, d); ``layer_w``: (K, d_h); ``filter_ws[i]``: (c_i, d_h).
    """
    h = pooled.transpose(0, 1)                                          # (K, B, d)
    z = ops.gelu(ops.matmul(h, reduce_w.transpose(1, 2)))              # (K, B, d_h)
    r_layer = ops.sum_(ops.mul(z, layer_w[:, None, :]), -1).transpose(0, 1)
    r_filter = ops.concat([ops.matmul(z[i], w.T) for i, w in enumerate(filter_ws)], -1)
    return RelevanceScores(r_layer, r_filter, len(filter_ws))


class GatingNetwork(nn.Module):
    def __init__(self, cfg: SupernetConfig):
        super().__init__()
        k, d, dh = cfg.num_layer_gates, cfg.d_model, cfg.gate_hidden
        self.embeddings = _xavier(k, d, fan_in=d, fan_out=k)
        self.reduce = _xavier(k, dh, d, fan_in=d, fan_out=dh)
        self.layer_head = _xavier(k, dh, fan_in=dh, fan_out=1)
        self.filter_heads = nn.ParameterList(
            [_xavier(c, dh, fan_in=dh, fan_out=c) for c in cfg.filter_counts])
        self.num_blocks = cfg.num_blocks

    def forward(self, features, mask):
        pooled = pool(features, mask, self.embeddings)
        return pooled, relevance(pooled.pooled, self.reduce, self.layer_head, list(self.filter_heads))


# ---------------------------------------------------------------------------
# gate generation


def logistic_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard Logistic samples ``ln u - ln(1 - u)``."""
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return np.log(u) - np.log1p(-u)


def _draws(rng, rows: int, width: int, granularity: str):
    """Noise and soft/hard selector draws, either from one stream or one per row."""
    if isinstance(rng, np.random.Generator):
        rng = [rng]
        per_row = False
    else:
        rng = list(rng)
        per_row = True
        if len(rng) != rows:
            raise ValueError(f"need one rng per sample ({rows}), got {len(rng)}")
    if per_row:
        eps = np.stack([logistic_noise(g, width) for g in rng])
        if granularity == "gate":
            sel = np.stack([g.random(width) for g in rng])
        else:
            sel = np.full((rows, width), rng[0].random())
    else:
        eps = logistic_noise(rng[0], (rows, width))
        sel = rng[0].random((rows, width)) if granularity == "gate" else np.full((rows, width), rng[0].random())
    return eps, sel


def binary_gates(scores: torch.Tensor, mode: str, noise=None, selector=None):
    """Turn scores into (realized gate, soft gate).

    Training: ``r_hat = r + noise``, soft = sigmoid(r_hat), hard = 1[r_hat >= 0]
    passed straight through with the sigmoid derivative, and the soft gate is
    used wherever ``selector >= 0.5``. Evaluation: no noise, hard gates only.
    """
    if torch.isnan(scores).any():
        raise ValueError("relevance score is NaN")
    if mode == "eval":
        soft = ops.sigmoid(scores)
        hard = (scores >= 0).to(scores.dtype)
        return hard, soft
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    noisy = scores if noise is None else ops.add(scores, noise)
    soft = ops.sigmoid(noisy)
    hard = (noisy >= 0).to(scores.dtype)
    straight = hard + (soft - soft.detach())
    if selector is None:
        return straight, soft
    return torch.where(selector >= 0.5, soft, straight), soft


def make_gates(scores: RelevanceScores, mode: str, rng=None,
               granularity: str = "gate") -> GateSet:
    """Gates for one batch of relevance scores.

    ``rng`` is a ``numpy.random.Generator`` for the whole batch or a sequence
    with one generator per sample; it is required in training mode and
    ignored in evaluation mode.
    """
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}")
    num_blocks = scores.num_blocks
    if mode == "eval":
        lg, ls = binary_gates(scores.layer, "eval")
        fg, fs = binary_gates(scores.filter, "eval")
        return GateSet(lg, fg, ls, fs, "eval", num_blocks)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ValueError("training-mode gates need an rng")
    both = torch.cat([scores.layer, scores.filter], -1)
    if torch.isnan(both).any():
        raise ValueError("relevance score is NaN")
    eps, sel = _draws(rng, both.shape[0], both.shape[1], granularity)
    eps = torch.as_tensor(eps, dtype=both.dtype)
    sel = torch.as_tensor(sel, dtype=both.dtype)
    gate, soft = binary_gates(both, "train", eps, sel)
    n = scores.layer.shape[-1]
    return GateSet(gate[:, :n], gate[:, n:], soft[:, :n], soft[:, n:], "train", num_blocks)


# ---------------------------------------------------------------------------
# corpus statistics


@dataclass
class GateStatistics:
    names: list[str]
    rates: np.ndarray            # per-gate ON rate
    layer_counts: np.ndarray     # per expression: selected block layers, interaction sublayers
    filter_counts: np.ndarray    # per expression: selected filters per block
    distinct_patterns: int

    @property
    def never_selected(self) -> int:
        return int((self.rates == 0).sum())

    @property
    def always_selected(self) -> int:
        return int((self.rates == 1).sum())


def gate_statistics(flat_gates: np.ndarray, cfg: SupernetConfig) -> GateStatistics:
    """Selection rates and per-expression counts from eval gates in export order.

    ``flat_gates``: (N, G) array of 0/1 values laid out as ``GateSet.flat``.
    """
    flat = np.asarray(flat_gates, dtype=np.float64)
    if flat.ndim != 2 or flat.shape[0] == 0:
        raise ValueError("gate statistics need a non-empty (N, G) corpus")
    if not np.isin(flat, (0.0, 1.0)).all():
        raise ValueError("gate statistics need binary (eval-mode) gates")
    names = gate_names(cfg)
    if flat.shape[1] != len(names):
        raise ValueError(f"expected {len(names)} gate columns, got {flat.shape[1]}")
    p, nf = cfg.num_blocks, cfg.num_filter_gates
    blocks = flat[:, :p]
    filters = flat[:, p:p + nf]
    inter = flat[:, p + nf:]
    bounds = np.cumsum([0] + cfg.filter_counts)
    per_block = np.stack([filters[:, a:b].sum(1) for a, b in zip(bounds[:-1], bounds[1:])], 1)
    layer_counts = np.stack([blocks.sum(1), inter.sum(1)], 1)
    distinct = len({row.tobytes() for row in flat.astype(np.uint8)})
    return GateStatistics(names, flat.mean(0), layer_counts, per_block, distinct)


def histogram(counts: np.ndarray, max_count: int) -> np.ndarray:
    """Frequency of each integer count 0..max_count."""
    return np.bincount(np.asarray(counts, dtype=np.int64), minlength=max_count + 1)


def write_gate_csv(path, ids: Sequence, flat_gates: np.ndarray, cfg: SupernetConfig):
    names = gate_names(cfg)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["expression_id"] + names)
        for sid, row in zip(ids, np.asarray(flat_gates)):
            w.writerow([sid] + [int(v) for v in row])


def read_gate_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    ids = [r[0] for r in body]
    gates = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), len(header) - 1)
    return ids, header[1:], gates


def logistic_moments(n: int, seed: int = 0) -> tuple[float, float]:
    """Sample mean and variance of ``n`` Logistic draws (target 0 and pi^2/3)."""
    eps = logistic_noise(np.random.default_rng(seed), n)
    return float(eps.mean()), float(eps.var())


LOGISTIC_VARIANCE = math.pi ** 2 / 3
