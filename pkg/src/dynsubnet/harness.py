"""Checkpoint-level operations behind the command line."""

from __future__ import annotations

import csv
import json
import statistics
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .analysis import word_scores, write_statistics, write_word_scores
from .extraction import (materialize, measure_latency, plan_subnet, profile, profile_supernet)
from .gating import gate_statistics, write_gate_csv
from .synthetic import SceneDataset, Vocabulary, prec_at_05
from .train import evaluate_model, load_data


def load_split(config, split: str):
    train, val, vocab = load_data(config)
    records = {"train": train, "val": val}.get(split)
    if records is None:
        raise ValueError(f"unknown split {split!r} (expected train or val)")
    if not records:
        raise ValueError(f"split {split!r} is empty")
    return SceneDataset(records, config.image_size, config.max_len), vocab


def evaluate(ckpt, split: str = "val", out_dir=None, latency_samples: int = 20) -> dict:
    """Prec@0.5, per-expression latency and gate summary for one split."""
    model, config, _ = checkpoint.load_model(ckpt)
    data, _ = load_split(config, split)
    ev = evaluate_model(model, data)
    stats = gate_statistics(ev.gates, config.supernet())
    latencies = []
    for i in range(min(latency_samples, len(data))):
        image, ids, mask, _ = data.batch([i])
        latencies.append(expression_latency(model, image, ids, mask))
    metrics = {
        "split": split,
        "count": len(data),
        "prec_at_0.5": ev.prec,
        "latency_ms": 1e3 * statistics.fmean(latencies) if latencies else None,
        "latency_samples": len(latencies),
        "gates_on": float(ev.gates.mean()),
        "distinct_patterns": stats.distinct_patterns,
        "never_selected": stats.never_selected,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_predictions(out / f"predictions_{split}.csv", data, ev)
        (out / f"metrics_{split}.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    return metrics


@torch.no_grad()
def expression_latency(model, image, ids, mask, repeats: int = 10, warmup: int = 3) -> float:
    """Mean seconds for token encoding, gating and the extracted subnet forward."""
    model.eval()
    text = model.supernet.text(ids, mask)
    gates, _, _ = model.gates(text, mask, "eval")
    subnet = materialize(plan_subnet(gates, model.cfg), model.supernet)

    def run():
        t = model.supernet.text(ids, mask)
        model.gates(t, mask, "eval")
        return subnet(image, t, mask)

    return statistics.fmean(measure_latency(run, repeats, warmup))


def write_predictions(path, data: SceneDataset, ev):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "pred_cx", "pred_cy", "pred_w", "pred_h",
                    "gt_cx", "gt_cy", "gt_w", "gt_h", "hit"])
        for r, box, hit in zip(data.records, ev.boxes.tolist(), ev.hits.tolist()):
            w.writerow([r.scene_id, *map(repr, box), *map(repr, r.box), int(hit)])


def recount_predictions(path) -> float:
    """Prec@0.5 recomputed from a prediction dump."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    pred = [[float(r[f"pred_{k}"]) for k in ("cx", "cy", "w", "h")] for r in rows]
    gt = [[float(r[f"gt_{k}"]) for k in ("cx", "cy", "w", "h")] for r in rows]
    return prec_at_05(pred, gt)


def encode_expression(expression: str, vocab: Vocabulary, max_len: int):
    ids = vocab.encode(expression)
    if len(ids) > max_len:
        raise ValueError(f"expression has {len(ids)} tokens, max_len is {max_len}")
    t = torch.tensor([ids], dtype=torch.long)
    return t, t != 0


@torch.no_grad()
def extract(ckpt, expression: str | None = None, scene_index: int = 0, split: str = "val",
            repeats: int = 100) -> dict:
    """Plan, profile and prediction of the subnet for one expression."""
    model, config, _ = checkpoint.load_model(ckpt)
    data, vocab = load_split(config, split)
    record = data.records[scene_index]
    expression = record.expression if expression is None else expression
    ids, mask = encode_expression(expression, vocab, config.max_len)
    image = data.images[scene_index:scene_index + 1]
    text = model.supernet.text(ids, mask)
    gates, _, _ = model.gates(text, mask, "eval")
    plan = plan_subnet(gates, config.supernet())
    subnet = materialize(plan, model.supernet, text, mask)
    box = subnet(image)
    masked = model.supernet.ground(image, text, mask, gates.layer, gates.filter)
    sub_report = profile(plan, model.supernet, image, text, mask, repeats=repeats)
    full_report = profile_supernet(model.supernet, image, text, mask, repeats=repeats)
    return {
        "expression": expression,
        "scene_id": record.scene_id,
        "plan": json.loads(plan.to_json()),
        "box": box[0].tolist(),
        "masked_box": masked[0].tolist(),
        "subnet": json.loads(sub_report.to_json()),
        "full": json.loads(full_report.to_json()),
        "flops_saving": 1.0 - sub_report.flops / full_report.flops,
    }


def eval_gates(ckpt, split: str = "val"):
    model, config, _ = checkpoint.load_model(ckpt)
    data, vocab = load_split(config, split)
    ev = evaluate_model(model, data, keep_alpha=True)
    return model, config, data, vocab, ev


def stats(ckpt, split: str = "val", out_dir=".") -> dict:
    """Gate selection tables, count histograms and the gate-vector CSV."""
    _, config, data, _, ev = eval_gates(ckpt, split)
    cfg = config.supernet()
    st = gate_statistics(ev.gates, cfg)
    summary = write_statistics(out_dir, st, cfg)
    write_gate_csv(Path(out_dir) / "gate_vectors.csv", [r.scene_id for r in data.records], ev.gates, cfg)
    (Path(out_dir) / "stats_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def export_gates(ckpt, split: str = "val", out_dir=".") -> Path:
    _, config, data, _, ev = eval_gates(ckpt, split)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    path = Path(out_dir) / "gate_vectors.csv"
    write_gate_csv(path, [r.scene_id for r in data.records], ev.gates, config.supernet())
    return path


def export_word_scores(ckpt, split: str = "val", out_dir=".") -> dict:
    _, config, data, vocab, ev = eval_gates(ckpt, split)
    ids, _ = data.tokens()
    scores = word_scores(ev.alphas, ids, config.supernet().num_blocks, vocab.itos)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    write_word_scores(Path(out_dir) / "word_scores.csv", scores)
    return scores
