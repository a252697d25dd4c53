"""Grounding supernet: token encoder, gateable residual backbone, gateable
cross-modal transformer and box head.

Every gate argument is optional. Passing ``None`` runs the plain (ungated)
network; passing ones reproduces it bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from . import ops

PAD_ID, CLS_ID, UNK_ID = 0, 1, 2


@dataclass
class SupernetConfig:
    vocab_size: int = 32
    d_model: int = 64
    text_layers: int = 2
    image_size: int = 64
    stage_widths: tuple = (16, 32, 64, 128)
    stage_strides: tuple = (1, 2, 2, 1)
    blocks_per_stage: int = 2
    bottleneck_ratio: float = 0.5
    stem_width: int = 16
    interaction_layers: int = 4
    heads: int = 4
    ffn_mult: int = 2
    gate_hidden: int = 32
    max_len: int = 16
    head_hidden: int = 64
    # "pre": x + g*F(LN(x)); "post": x + g*LN(F(x)). Both keep g=0 an identity.
    interaction_norm: str = "pre"

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.stage_strides = tuple(int(s) for s in self.stage_strides)
        if len(self.stage_strides) != len(self.stage_widths):
            raise ValueError("stage_strides and stage_widths differ in length")
        for name in ("vocab_size", "d_model", "text_layers", "image_size", "blocks_per_stage",
                     "stem_width", "interaction_layers", "heads", "ffn_mult", "gate_hidden",
                     "max_len", "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if any(w < 1 for w in self.stage_widths):
            raise ValueError("stage widths must be >= 1")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.interaction_norm not in ("pre", "post"):
            raise ValueError("interaction_norm must be 'pre' or 'post'")

    @property
    def block_widths(self) -> list[int]:
        return [w for w in self.stage_widths for _ in range(self.blocks_per_stage)]

    @property
    def filter_counts(self) -> list[int]:
        """Gateable bottleneck filters c_i per backbone block."""
        return [max(1, int(w * self.bottleneck_ratio)) for w in self.block_widths]

    @property
    def num_blocks(self) -> int:
        return len(self.stage_widths) * self.blocks_per_stage

    @property
    def num_sublayers(self) -> int:
        return 2 * self.interaction_layers

    @property
    def num_layer_gates(self) -> int:
        return self.num_blocks + self.num_sublayers

    @property
    def num_filter_gates(self) -> int:
        return sum(self.filter_counts)

    @property
    def feature_side(self) -> int:
        side = self.image_size // 4  # stem: stride-2 conv then 2x2 max-pool
        for s in self.stage_strides:
            side = (side + s - 1) // s
        return side


# ---------------------------------------------------------------------------
# parameterized layers


def _xavier(*shape, fan_in: int, fan_out: int) -> nn.Parameter:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return nn.Parameter(torch.empty(*shape).uniform_(-bound, bound))


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = _xavier(d_out, d_in, fan_in=d_in, fan_out=d_out)
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1):
        super().__init__()
        k2 = kernel * kernel
        self.weight = _xavier(c_out, c_in, kernel, kernel, fan_in=c_in * k2, fan_out=c_out * k2)
        self.stride = stride
        self.padding = kernel // 2

    def forward(self, x):
        return ops.conv2d(x, self.weight, None, self.stride, self.padding)


class BatchNorm(nn.Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return ops.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                              self.training, self.momentum, self.eps)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


def _row_gate(gate, ndim: int):
    """Reshape a per-sample gate (B,) or (B, C) to broadcast over activations."""
    return gate.reshape(gate.shape + (1,) * (ndim - gate.dim()))


# ---------------------------------------------------------------------------
# visual backbone


class ResidualBlock(nn.Module):
    """``shortcut(x) + g_L * F(x)`` with filter gates on the inner channels.

    ``F(x) = BN(conv3x3(g_C * relu(BN(conv3x3(x)))))``.
    """

    def __init__(self, c_in: int, c_out: int, filters: int, stride: int):
        super().__init__()
        self.conv1 = Conv(c_in, filters, 3, stride)
        self.bn1 = BatchNorm(filters)
        self.conv2 = Conv(filters, c_out, 3)
        self.bn2 = BatchNorm(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(Conv(c_in, c_out, 1, stride), BatchNorm(c_out))
        self.filters = filters

    def residual(self, x, filter_gate=None):
        y = ops.relu(self.bn1(self.conv1(x)))
        if filter_gate is not None:
            y = ops.mul(y, _row_gate(filter_gate, 4))
        return self.bn2(self.conv2(y))

    def forward(self, x, layer_gate=None, filter_gate=None):
        if filter_gate is not None and filter_gate.shape[-1] != self.filters:
            raise ValueError(f"filter gate width {filter_gate.shape[-1]} != {self.filters}")
        skip = x if self.shortcut is None else self.shortcut(x)
        f = self.residual(x, filter_gate)
        if layer_gate is not None:
            f = ops.mul(f, _row_gate(layer_gate, 4))
        return ops.add(skip, f)


class Backbone(nn.Module):
    def __init__(self, cfg: SupernetConfig):
        super().__init__()
        self.stem_conv = Conv(3, cfg.stem_width, 3, stride=2)
        self.stem_bn = BatchNorm(cfg.stem_width)
        blocks = []
        c_in = cfg.stem_width
        filters = iter(cfg.filter_counts)
        for width, stride in zip(cfg.stage_widths, cfg.stage_strides):
            for b in range(cfg.blocks_per_stage):
                blocks.append(ResidualBlock(c_in, width, next(filters), stride if b == 0 else 1))
                c_in = width
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = c_in
        self.filter_counts = cfg.filter_counts

    def stem(self, image):
        return ops.max_pool2d(ops.relu(self.stem_bn(self.stem_conv(image))), 2)

    def forward(self, image, layer_gates=None, filter_gates=None):
        """``layer_gates``: (B, P); ``filter_gates``: (B, sum c_i)."""
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"image batch must be (B, 3, S, S), got {tuple(image.shape)}")
        if layer_gates is not None and layer_gates.shape[-1] != len(self.blocks):
            raise ValueError(f"expected {len(self.blocks)} layer gates, got {layer_gates.shape[-1]}")
        if filter_gates is not None and filter_gates.shape[-1] != sum(self.filter_counts):
            raise ValueError(f"expected {sum(self.filter_counts)} filter gates, "
                             f"got {filter_gates.shape[-1]}")
        x = self.stem(image)
        offset = 0
        for i, block in enumerate(self.blocks):
            lg = None if layer_gates is None else layer_gates[:, i]
            fg = None
            if filter_gates is not None:
                fg = filter_gates[:, offset:offset + block.filters]
            offset += block.filters
            x = block(x, lg, fg)
        return x


# ---------------------------------------------------------------------------
# transformer pieces


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.qkv = Linear(d, 3 * d)
        self.out = Linear(d, d)
        self.heads = heads

    def forward(self, x, mask):
        """``mask``: (B, T) bool, True for tokens that may be attended to."""
        b, t, d = x.shape
        dh = d // self.heads
        q, k, v = self.qkv(x).reshape(b, t, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        logits = ops.matmul(q, k.transpose(-1, -2)) * (1.0 / math.sqrt(dh))
        attn = ops.softmax(logits, -1, mask[:, None, None, :])
        y = ops.matmul(attn, v).transpose(1, 2).reshape(b, t, d)
        return self.out(y)


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(d, hidden)
        self.fc2 = Linear(hidden, d)

    def forward(self, x, mask=None):
        return self.fc2(ops.gelu(self.fc1(x)))


class Sublayer(nn.Module):
    """One gateable residual sublayer: ``x + g * F(x)`` with its own norm."""

    def __init__(self, body: nn.Module, d: int, norm: str):
        super().__init__()
        self.body = body
        self.norm = LayerNorm(d)
        self.norm_position = norm

    def residual(self, x, mask):
        if self.norm_position == "pre":
            return self.body(self.norm(x), mask)
        return self.norm(self.body(x, mask))

    def forward(self, x, mask, gate=None):
        f = self.residual(x, mask)
        if gate is not None:
            f = ops.mul(f, _row_gate(gate, 3))
        return ops.add(x, f)


def make_sublayers(d: int, heads: int, ffn_hidden: int, layers: int, norm: str) -> nn.ModuleList:
    """Alternating attention / feed-forward sublayers, 2 per encoder layer."""
    subs = []
    for _ in range(layers):
        subs.append(Sublayer(Attention(d, heads), d, norm))
        subs.append(Sublayer(FeedForward(d, ffn_hidden), d, norm))
    return nn.ModuleList(subs)


class TextEncoder(nn.Module):
    """Token embedding + sinusoidal positions + small transformer. Never gated."""

    def __init__(self, cfg: SupernetConfig):
        super().__init__()
        d = cfg.d_model
        self.embed = _xavier(cfg.vocab_size, d, fan_in=cfg.vocab_size, fan_out=d)
        self.register_buffer("positions", ops.sinusoidal_table(cfg.max_len, d), persistent=False)
        self.layers = make_sublayers(d, cfg.heads, cfg.ffn_mult * d, cfg.text_layers, "pre")
        self.norm = LayerNorm(d)
        self.max_len = cfg.max_len
        self.vocab_size = cfg.vocab_size

    def forward(self, ids, mask):
        """Returns (B, L, d) token features; pads are excluded from attention."""
        if ids.shape[-1] > self.max_len:
            raise ValueError(f"expression length {ids.shape[-1]} exceeds max_len {self.max_len}")
        ids = torch.where((ids < 0) | (ids >= self.vocab_size), torch.full_like(ids, UNK_ID), ids)
        pos = torch.arange(ids.shape[-1])
        x = ops.add(ops.embedding(ids, self.embed), ops.embedding(pos, self.positions))
        for layer in self.layers:
            x = layer(x, mask)
        return self.norm(x)


class Interaction(nn.Module):
    """Projects both modalities to ``d_model`` and runs gateable sublayers.

    Text tokens come first so the [CLS] feature sits at position 0.
    """

    def __init__(self, cfg: SupernetConfig, visual_channels: int):
        super().__init__()
        d = cfg.d_model
        tokens = cfg.feature_side ** 2
        self.register_buffer("positions", ops.sinusoidal_table(tokens, visual_channels),
                             persistent=False)
        self.visual_proj = Linear(visual_channels, d)
        self.text_proj = Linear(d, d)
        self.layers = make_sublayers(d, cfg.heads, cfg.ffn_mult * d, cfg.interaction_layers,
                                     cfg.interaction_norm)

    def tokens(self, visual, text, text_mask):
        """Flatten visual map, add positions, project, concatenate."""
        b, c, h, w = visual.shape
        if text.shape[-1] != self.text_proj.weight.shape[1]:
            raise ValueError(f"text width {text.shape[-1]} != {self.text_proj.weight.shape[1]}")
        if c != self.visual_proj.weight.shape[1]:
            raise ValueError(f"visual width {c} != {self.visual_proj.weight.shape[1]}")
        v = visual.flatten(2).transpose(1, 2)
        v = ops.add(v, self.positions[: h * w])
        x = ops.concat([self.text_proj(text), self.visual_proj(v)], 1)
        mask = torch.cat([text_mask, torch.ones(b, h * w, dtype=torch.bool)], 1)
        return x, mask

    def forward(self, visual, text, text_mask, gates=None):
        """Fused [CLS] feature (B, d). ``gates``: (B, 2M) in MHSA/FFN order."""
        if gates is not None and gates.shape[-1] != len(self.layers):
            raise ValueError(f"expected {len(self.layers)} interaction gates, got {gates.shape[-1]}")
        x, mask = self.tokens(visual, text, text_mask)
        for i, layer in enumerate(self.layers):
            x = layer(x, mask, None if gates is None else gates[:, i])
        return x[:, 0]


class BoxHead(nn.Module):
    """LayerNorm followed by three FC layers and a sigmoid -> [cx, cy, w, h]."""

    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.norm = LayerNorm(d)
        self.fc1 = Linear(d, hidden)
        self.fc2 = Linear(hidden, hidden)
        self.fc3 = Linear(hidden, 4)

    def forward(self, x):
        x = ops.relu(self.fc1(self.norm(x)))
        x = ops.relu(self.fc2(x))
        return ops.sigmoid(self.fc3(x))


class Supernet(nn.Module):
    def __init__(self, cfg: SupernetConfig):
        super().__init__()
        self.cfg = cfg
        self.text = TextEncoder(cfg)
        self.backbone = Backbone(cfg)
        self.interaction = Interaction(cfg, self.backbone.out_channels)
        self.head = BoxHead(cfg.d_model, cfg.head_hidden)

    def split_gates(self, layer_gates):
        """(B, P + 2M) -> backbone part, interaction part."""
        if layer_gates is None:
            return None, None
        p = self.cfg.num_blocks
        if layer_gates.shape[-1] != self.cfg.num_layer_gates:
            raise ValueError(f"expected {self.cfg.num_layer_gates} layer gates, "
                             f"got {layer_gates.shape[-1]}")
        return layer_gates[:, :p], layer_gates[:, p:]

    def ground(self, image, text, text_mask, layer_gates=None, filter_gates=None):
        """Image path given precomputed token features."""
        backbone_gates, inter_gates = self.split_gates(layer_gates)
        visual = self.backbone(image, backbone_gates, filter_gates)
        fused = self.interaction(visual, text, text_mask, inter_gates)
        return self.head(fused)

    def forward(self, image, ids, mask, layer_gates=None, filter_gates=None):
        text = self.text(ids, mask)
        return self.ground(image, text, mask, layer_gates, filter_gates)
