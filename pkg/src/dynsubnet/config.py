"""Run configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .objectives import LossConfig
from .supernet import SupernetConfig


@dataclass
class RunConfig:
    # model
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
    interaction_norm: str = "pre"
    # loss
    giou_weight: float = 1.0
    mi_weight: float = 0.1
    # optimization
    lr: float = 1e-3
    backbone_lr: float = 1e-4
    weight_decay: float = 1e-4
    decay_at: float = 0.75
    decay_factor: float = 0.1
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    gate_mix_granularity: str = "gate"
    flip_augment: bool = False
    threads: int = 1
    # data
    train_count: int = 8000
    val_count: int = 1000
    data_seed: int = 0
    train_path: str = ""
    val_path: str = ""
    vocab_path: str = ""
    out_dir: str = "runs"

    def __post_init__(self):
        self.stage_widths = tuple(int(v) for v in self.stage_widths)
        self.stage_strides = tuple(int(v) for v in self.stage_strides)
        if self.gate_mix_granularity not in ("gate", "batch"):
            raise ValueError("gate_mix_granularity must be 'gate' or 'batch'")
        for name in ("batch_size", "epochs", "threads", "train_count", "val_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (the MI estimate needs a batch)")
        self.supernet()
        self.loss()

    def supernet(self) -> SupernetConfig:
        names = {f.name for f in fields(SupernetConfig)}
        return SupernetConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def loss(self) -> LossConfig:
        return LossConfig(self.giou_weight, self.mi_weight)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- flat text format ---------------------------------------------------

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, **overrides) -> "RunConfig":
        values = {}
        types = {f.name: f.default for f in fields(cls)}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {n}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {n}: unknown key {key!r}")
            values[key] = _parse(value, types[key], key)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read(), **overrides)


def _parse(value: str, default, key: str):
    try:
        if isinstance(default, bool):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.split(",") if v.strip())
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {value!r}") from None
