"""Synthetic referring-expression scenes.

Scenes are stored symbolically (JSON lines) and rasterized on demand. Each
record carries one expression that picks out exactly one object under the
template semantics implemented by :func:`resolve`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .objectives import box_iou, cxcywh_to_xyxy
from .supernet import CLS_ID, PAD_ID, UNK_ID

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.75, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 0.75, 0.0),
    "purple": (0.5, 0.0, 0.5),
}
SIZES = {"small": 0.2, "large": 0.32}
RELATIONS = ("left of", "right of", "above", "below")
TEMPLATES = ("color_shape", "size_color_shape", "relation")
RESERVED = ("[PAD]", "[CLS]", "[UNK]")


@dataclass
class GenConfig:
    min_objects: int = 2
    max_objects: int = 4
    template_weights: tuple = (0.4, 0.3, 0.3)
    relation_margin: float = 0.1
    max_retries: int = 200


@dataclass
class SceneRecord:
    scene_id: int
    objects: list          # dicts: shape, color, size, cx, cy, extent
    target: int
    expression: str
    tokens: list
    box: list              # normalized [cx, cy, w, h]
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SceneRecord":
        return cls(**json.loads(line))


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    def __init__(self, words: Iterable[str]):
        self.itos = list(RESERVED) + sorted(set(words) - set(RESERVED))
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def default(cls) -> "Vocabulary":
        words = list(COLORS) + list(SHAPES) + list(SIZES)
        for rel in RELATIONS:
            words += rel.split()
        return cls(words)

    def __len__(self):
        return len(self.itos)

    def encode(self, expression: str) -> list[int]:
        return [CLS_ID] + [self.stoi.get(w, UNK_ID) for w in expression.split()]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] if 0 <= i < len(self.itos) else "[UNK]" for i in ids]

    def to_json(self) -> str:
        return json.dumps(self.stoi, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        stoi = json.loads(text)
        vocab = cls([])
        vocab.itos = [w for w, _ in sorted(stoi.items(), key=lambda kv: kv[1])]
        vocab.stoi = {w: i for i, w in enumerate(vocab.itos)}
        if vocab.stoi != stoi:
            raise ValueError("vocabulary ids are not dense")
        return vocab


# ---------------------------------------------------------------------------
# template semantics


def related(a: dict, b: dict, relation: str) -> bool:
    if relation == "left of":
        return a["cx"] < b["cx"]
    if relation == "right of":
        return a["cx"] > b["cx"]
    if relation == "above":
        return a["cy"] < b["cy"]
    if relation == "below":
        return a["cy"] > b["cy"]
    raise ValueError(f"unknown relation {relation!r}")


def parse(expression: str) -> dict:
    """Split an expression into its template slots."""
    words = expression.split()
    if len(words) == 2:
        return {"color": words[0], "shape": words[1]}
    if len(words) == 3:
        return {"size": words[0], "color": words[1], "shape": words[2]}
    for rel in RELATIONS:
        r = rel.split()
        n = len(r)
        if len(words) == 4 + n and words[2:2 + n] == r:
            return {"color": words[0], "shape": words[1], "relation": rel,
                    "anchor": {"color": words[2 + n], "shape": words[3 + n]}}
    raise ValueError(f"expression does not match any template: {expression!r}")


def _matches(obj: dict, slots: dict) -> bool:
    return all(obj[k] == slots[k] for k in ("size", "color", "shape") if k in slots)


def resolve(objects: Sequence[dict], expression: str) -> list[int]:
    """Indices of all objects the expression can refer to."""
    slots = parse(expression)
    hits = []
    for i, obj in enumerate(objects):
        if not _matches(obj, slots):
            continue
        if "relation" in slots:
            if not any(j != i and _matches(other, slots["anchor"])
                       and related(obj, other, slots["relation"])
                       for j, other in enumerate(objects)):
                continue
        hits.append(i)
    return hits


# ---------------------------------------------------------------------------
# generation


def _corners(obj):
    r = obj["extent"] / 2
    return (obj["cx"] - r, obj["cy"] - r, obj["cx"] + r, obj["cy"] + r)


def _disjoint(a, b) -> bool:
    ax0, ay0, ax1, ay1 = _corners(a)
    bx0, by0, bx1, by1 = _corners(b)
    return ax1 <= bx0 or bx1 <= ax0 or ay1 <= by0 or by1 <= ay0


def _random_object(rng, **fixed) -> dict:
    obj = {
        "shape": fixed.get("shape") or str(rng.choice(SHAPES)),
        "color": fixed.get("color") or str(rng.choice(list(COLORS))),
        "size": fixed.get("size") or str(rng.choice(list(SIZES))),
    }
    obj["extent"] = SIZES[obj["size"]]
    return obj


def _place(rng, objects, tries: int = 50) -> bool:
    """Give every object a position; objects never overlap."""
    placed = []
    for obj in objects:
        for _ in range(tries):
            r = obj["extent"] / 2
            obj["cx"] = float(rng.uniform(r, 1 - r))
            obj["cy"] = float(rng.uniform(r, 1 - r))
            if all(_disjoint(obj, p) for p in placed):
                placed.append(obj)
                break
        else:
            return False
    return True


def _attempt(rng, cfg: GenConfig, template: str):
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    target = _random_object(rng)
    if template == "color_shape":
        objects = [target] + [_random_object(rng) for _ in range(n - 1)]
        if not _place(rng, objects):
            return None
        expression = f"{target['color']} {target['shape']}"
    elif template == "size_color_shape":
        other = "small" if target["size"] == "large" else "large"
        distractor = _random_object(rng, shape=target["shape"], color=target["color"], size=other)
        objects = [target, distractor] + [_random_object(rng) for _ in range(n - 2)]
        if not _place(rng, objects):
            return None
        expression = f"{target['size']} {target['color']} {target['shape']}"
    else:
        n = max(n, 3)
        distractor = _random_object(rng, shape=target["shape"], color=target["color"])
        while True:
            anchor = _random_object(rng)
            if (anchor["color"], anchor["shape"]) != (target["color"], target["shape"]):
                break
        objects = [target, distractor, anchor] + [_random_object(rng) for _ in range(n - 3)]
        if not _place(rng, objects):
            return None
        valid = []
        for rel in RELATIONS:
            axis = "cx" if rel in ("left of", "right of") else "cy"
            if (related(target, anchor, rel) and not related(distractor, anchor, rel)
                    and abs(target[axis] - anchor[axis]) >= cfg.relation_margin
                    and abs(distractor[axis] - anchor[axis]) >= cfg.relation_margin):
                valid.append(rel)
        if not valid:
            return None
        relation = valid[int(rng.integers(len(valid)))]
        expression = f"{target['color']} {target['shape']} {relation} {anchor['color']} {anchor['shape']}"
    order = rng.permutation(len(objects))
    objects = [objects[i] for i in order]
    target_index = int(np.argsort(order)[0])
    if resolve(objects, expression) != [target_index]:
        return None
    return objects, target_index, expression


def generate_record(scene_id: int, seed: int, vocab: Vocabulary,
                    cfg: GenConfig | None = None) -> SceneRecord:
    """One scene, seeded by (seed, scene_id) so records are independent."""
    cfg = cfg or GenConfig()
    rng = np.random.default_rng([seed, scene_id])
    weights = np.asarray(cfg.template_weights, dtype=float)
    template = TEMPLATES[int(rng.choice(len(TEMPLATES), p=weights / weights.sum()))]
    for _ in range(cfg.max_retries):
        got = _attempt(rng, cfg, template)
        if got is None:
            continue
        objects, target, expression = got
        t = objects[target]
        return SceneRecord(scene_id, objects, target, expression, vocab.encode(expression),
                           [t["cx"], t["cy"], t["extent"], t["extent"]], seed)
    raise RuntimeError(f"scene {scene_id} (seed {seed}): no unambiguous {template} scene "
                       f"after {cfg.max_retries} retries")


def generate(count: int, seed: int, cfg: GenConfig | None = None, start_id: int = 0):
    """``count`` records with scene ids ``start_id, start_id + 1, ...``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    vocab = Vocabulary.default()
    records = [generate_record(start_id + i, seed, vocab, cfg) for i in range(count)]
    return records, vocab


def flip_record(record: SceneRecord, vocab: Vocabulary) -> SceneRecord:
    """Mirror the scene left-right and swap the relation words to match."""
    objects = [dict(o, cx=1.0 - o["cx"]) for o in record.objects]
    swap = {"left": "right", "right": "left"}
    expression = " ".join(swap.get(w, w) for w in record.expression.split())
    cx, cy, w, h = record.box
    return SceneRecord(record.scene_id, objects, record.target, expression,
                       vocab.encode(expression), [1.0 - cx, cy, w, h], record.seed)


def save_records(path, records: Sequence[SceneRecord]):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def load_records(path) -> list[SceneRecord]:
    with open(path, encoding="utf-8") as fh:
        return [SceneRecord.from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# rendering


def object_mask(obj: dict, side: int) -> np.ndarray:
    """Hard-edged (side, side) coverage mask sampled at pixel centers."""
    c = (np.arange(side) + 0.5) / side
    x, y = c[None, :], c[:, None]
    r = obj["extent"] / 2
    dx, dy = x - obj["cx"], y - obj["cy"]
    if obj["shape"] == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if obj["shape"] == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if obj["shape"] == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    raise ValueError(f"unknown shape {obj['shape']!r}")


def render(record: SceneRecord | Sequence[dict], side: int = 64) -> np.ndarray:
    """RGB image (3, side, side) in [0, 1] on a white background."""
    if side < 32:
        raise ValueError("side must be >= 32")
    objects = record.objects if isinstance(record, SceneRecord) else record
    img = np.ones((3, side, side), dtype=np.float32)
    for obj in objects:
        m = object_mask(obj, side)
        for ch, v in enumerate(COLORS[obj["color"]]):
            img[ch][m] = v
    return img


def split_ids(records: Sequence[SceneRecord]) -> set:
    return {r.scene_id for r in records}


# ---------------------------------------------------------------------------
# evaluation


def prec_at_05(pred, gt) -> float:
    """Fraction of cxcywh predictions whose IoU with ground truth exceeds 0.5."""
    pred = torch.as_tensor(pred, dtype=torch.float64)
    gt = torch.as_tensor(gt, dtype=torch.float64)
    if pred.numel() == 0 or gt.numel() == 0:
        raise ValueError("prec_at_05 needs at least one box")
    if pred.shape != gt.shape:
        raise ValueError(f"prediction/ground-truth shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return float(hits_at_05(pred, gt).double().mean())


def hits_at_05(pred, gt):
    iou = box_iou(cxcywh_to_xyxy(torch.as_tensor(pred, dtype=torch.float64)),
                  cxcywh_to_xyxy(torch.as_tensor(gt, dtype=torch.float64)))
    return iou > 0.5


# ---------------------------------------------------------------------------
# batching


class SceneDataset:
    """Records plus a lazily built cache of rendered images and padded tokens."""

    def __init__(self, records: Sequence[SceneRecord], side: int = 64, max_len: int = 16):
        self.records = list(records)
        self.side = side
        self.max_len = max_len
        self._images = None

    def __len__(self):
        return len(self.records)

    @property
    def images(self) -> torch.Tensor:
        if self._images is None:
            self._images = torch.from_numpy(np.stack([render(r, self.side) for r in self.records]))
        return self._images

    def tokens(self, records: Sequence[SceneRecord] | None = None):
        records = self.records if records is None else records
        ids = torch.full((len(records), self.max_len), PAD_ID, dtype=torch.long)
        for i, r in enumerate(records):
            if len(r.tokens) > self.max_len:
                raise ValueError(f"scene {r.scene_id}: expression longer than {self.max_len}")
            ids[i, :len(r.tokens)] = torch.tensor(r.tokens)
        return ids, ids != PAD_ID

    def boxes(self) -> torch.Tensor:
        return torch.tensor([r.box for r in self.records], dtype=torch.float32)

    def batch(self, index):
        index = torch.as_tensor(index, dtype=torch.long)
        recs = [self.records[i] for i in index.tolist()]
        ids, mask = self.tokens(recs)
        return self.images[index], ids, mask, torch.tensor([r.box for r in recs], dtype=torch.float32)
