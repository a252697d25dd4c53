"""Training and evaluation loops."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .config import RunConfig
from .model import GroundingModel
from .objectives import total_loss
from .synthetic import (SceneDataset, Vocabulary, flip_record, generate, hits_at_05,
                        load_records, save_records)

log = logging.getLogger(__name__)

STEP_FIELDS = ["step", "l1", "giou", "mi", "total"]
EPOCH_FIELDS = ["epoch", "l1", "giou", "mi", "total", "val_prec", "gates_on", "layers_on",
                "filters_on", "lr"]


class TrainingDiverged(RuntimeError):
    pass


def load_data(config: RunConfig):
    """(train records, val records, vocabulary), generated if no paths are given."""
    if config.train_path:
        train = load_records(config.train_path)
        val = load_records(config.val_path) if config.val_path else []
        if config.vocab_path:
            vocab = Vocabulary.from_json(Path(config.vocab_path).read_text(encoding="utf-8"))
        else:
            vocab = Vocabulary.default()
    else:
        train, vocab = generate(config.train_count, config.data_seed)
        val, _ = generate(config.val_count, config.data_seed, start_id=config.train_count)
    overlap = {r.scene_id for r in train} & {r.scene_id for r in val}
    if overlap:
        raise ValueError(f"train and val share {len(overlap)} scene ids")
    if len(vocab) > config.vocab_size:
        raise ValueError(f"vocabulary has {len(vocab)} tokens but vocab_size={config.vocab_size}")
    return train, val, vocab


def write_dataset(out_dir, config: RunConfig):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, vocab = generate(config.train_count, config.data_seed)
    val, _ = generate(config.val_count, config.data_seed, start_id=config.train_count)
    save_records(out / "train.jsonl", train)
    save_records(out / "val.jsonl", val)
    (out / "vocab.json").write_text(vocab.to_json(), encoding="utf-8")
    return out / "train.jsonl", out / "val.jsonl", out / "vocab.json"


def build_model(config: RunConfig) -> GroundingModel:
    torch.manual_seed(config.seed)
    return GroundingModel(config.supernet(), config.gate_mix_granularity)


def sample_rngs(seed: int, epoch: int, scene_ids) -> list[np.random.Generator]:
    """Independent gate-noise streams keyed by (seed, epoch, scene id)."""
    return [np.random.default_rng([seed, epoch, int(s)]) for s in scene_ids]


@dataclass
class EvalResult:
    boxes: torch.Tensor          # (N, 4) predictions
    gates: np.ndarray            # (N, G) eval gates in export order
    hits: np.ndarray             # (N,) IoU > 0.5
    alphas: torch.Tensor | None = None

    @property
    def prec(self) -> float:
        return float(self.hits.mean())


@torch.no_grad()
def evaluate_model(model: GroundingModel, data: SceneDataset, batch_size: int = 250,
                   keep_alpha: bool = False) -> EvalResult:
    """Eval-mode (noise-free, hard-gate) predictions over a whole dataset."""
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty split")
    was_training = model.training
    model.eval()
    boxes, gates, alphas = [], [], []
    for start in range(0, len(data), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(data)))
        image, ids, mask, _ = data.batch(idx)
        out = model(image, ids, mask, "eval")
        boxes.append(out.boxes)
        gates.append(out.gates.flat().numpy())
        if keep_alpha:
            alphas.append(out.pooling.alpha)
    model.train(was_training)
    boxes = torch.cat(boxes)
    hits = hits_at_05(boxes, data.boxes()).numpy()
    return EvalResult(boxes, np.concatenate(gates), hits,
                      torch.cat(alphas) if keep_alpha else None)


def _gate_fractions(gates: np.ndarray, config: RunConfig):
    cfg = config.supernet()
    p, nf = cfg.num_blocks, cfg.num_filter_gates
    layers = np.concatenate([gates[:, :p], gates[:, p + nf:]], 1)
    return float(gates.mean()), float(layers.mean()), float(gates[:, p:p + nf].mean())


def _flip_batch(images, records, rngs, vocab):
    """Mirror a random half of the batch (50% per sample) with relation words swapped."""
    out_images = images.clone()
    out_records = []
    for i, (r, g) in enumerate(zip(records, rngs)):
        if g.random() < 0.5:
            out_images[i] = torch.flip(images[i], [-1])
            r = flip_record(r, vocab)
        out_records.append(r)
    return out_images, out_records


@dataclass
class TrainResult:
    run_dir: Path
    model: GroundingModel
    epochs: list = field(default_factory=list)
    seconds: float = 0.0


def train(config: RunConfig, run_dir=None, data=None) -> TrainResult:
    """Train from scratch; every artifact goes under ``run_dir``."""
    torch.set_num_threads(config.threads)
    if run_dir is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(config.out_dir) / f"run-{stamp}-seed{config.seed}"
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(config.dumps(), encoding="utf-8")

    train_records, val_records, vocab = data or load_data(config)
    train_set = SceneDataset(train_records, config.image_size, config.max_len)
    val_set = SceneDataset(val_records, config.image_size, config.max_len)
    model = build_model(config)
    slow, fast = model.param_groups()
    opt = torch.optim.AdamW([{"params": slow, "lr": config.backbone_lr},
                             {"params": fast, "lr": config.lr}],
                            weight_decay=config.weight_decay)
    decay_epoch = int(math.ceil(config.decay_at * config.epochs))
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, [decay_epoch], config.decay_factor)
    loss_cfg = config.loss()

    steps_fh = open(run_dir / "steps.csv", "w", newline="")
    epochs_fh = open(run_dir / "epochs.csv", "w", newline="")
    step_log = csv.DictWriter(steps_fh, STEP_FIELDS)
    epoch_log = csv.DictWriter(epochs_fh, EPOCH_FIELDS)
    step_log.writeheader()
    epoch_log.writeheader()

    result = TrainResult(run_dir, model)
    started = time.perf_counter()
    step = 0
    n = len(train_set)
    images = train_set.images
    try:
        for epoch in range(config.epochs):
            model.train()
            order = np.random.default_rng([config.seed, epoch, 7]).permutation(n)
            sums = np.zeros(4)
            batches = 0
            for start in range(0, n - config.batch_size + 1, config.batch_size):
                idx = order[start:start + config.batch_size]
                recs = [train_records[i] for i in idx]
                rngs = sample_rngs(config.seed, epoch, [r.scene_id for r in recs])
                image = images[torch.as_tensor(idx)]
                if config.flip_augment:
                    aug = [np.random.default_rng([config.seed, epoch, r.scene_id, 1]) for r in recs]
                    image, recs = _flip_batch(image, recs, aug, vocab)
                ids, mask = train_set.tokens(recs)
                gt = torch.tensor([r.box for r in recs], dtype=torch.float32)

                out = model(image, ids, mask, "train", rngs)
                terms = total_loss(out.boxes, gt, out.gates.soft, loss_cfg)
                if not torch.isfinite(terms.total):
                    checkpoint.save(run_dir / "last_good", model, config, step, epoch)
                    diag = {"step": step, "epoch": epoch, "terms": terms.row(),
                            "scene_ids": [r.scene_id for r in recs]}
                    (run_dir / "diverged.json").write_text(json.dumps(diag), encoding="utf-8")
                    raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch})")
                opt.zero_grad(set_to_none=True)
                terms.total.backward()
                opt.step()
                row = terms.row()
                step_log.writerow({"step": step, **{k: repr(v) for k, v in row.items()}})
                sums += [row["l1"], row["giou"], row["mi"], row["total"]]
                batches += 1
                step += 1
            lr = opt.param_groups[1]["lr"]
            sched.step()
            ev = evaluate_model(model, val_set) if len(val_set) else None
            gates_on, layers_on, filters_on = _gate_fractions(ev.gates, config) if ev else (0, 0, 0)
            means = [float(v) for v in sums / max(batches, 1)]
            entry = {"epoch": epoch, "l1": repr(means[0]), "giou": repr(means[1]),
                     "mi": repr(means[2]), "total": repr(means[3]),
                     "val_prec": repr(ev.prec if ev else float("nan")),
                     "gates_on": repr(gates_on), "layers_on": repr(layers_on),
                     "filters_on": repr(filters_on), "lr": repr(lr)}
            epoch_log.writerow(entry)
            epochs_fh.flush()
            steps_fh.flush()
            result.epochs.append(entry)
            log.info("epoch %d total=%.4f val_prec=%.4f gates_on=%.3f", epoch, means[3],
                     ev.prec if ev else float("nan"), gates_on)
    finally:
        steps_fh.close()
        epochs_fh.close()
    result.seconds = time.perf_counter() - started
    checkpoint.save(run_dir / "checkpoint", model, config, step, config.epochs,
                    {"seed": config.seed, "epochs_done": config.epochs})
    (run_dir / "timing.json").write_text(json.dumps({"train_seconds": result.seconds}),
                                         encoding="utf-8")
    return result
