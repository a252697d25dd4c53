"""Corpus-level views of trained gates: selection tables and word assignment."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .gating import GateStatistics, histogram
from .supernet import SupernetConfig


@dataclass
class WordScore:
    word: str
    count: int
    mass: np.ndarray      # averaged attention mass per candidate layer
    backbone: float
    interaction: float


def word_scores(alphas, token_ids, num_blocks: int, itos, skip=("[PAD]", "[CLS]", "[UNK]")):
    """Backbone vs interaction preference of each word.

    ``alphas``: (N, K, L) pooling weights; ``token_ids``: (N, L). For each word
    the attention mass it receives is averaged over the expressions containing
    it, softmax-normalized across the K candidate layers, and split into the
    first ``num_blocks`` (backbone) and remaining (interaction) entries.
    """
    alphas = torch.as_tensor(alphas, dtype=torch.float64)
    ids = torch.as_tensor(token_ids, dtype=torch.long)
    out = {}
    for wid in torch.unique(ids).tolist():
        word = itos[wid] if wid < len(itos) else "[UNK]"
        if word in skip:
            continue
        hit = (ids == wid)                                   # (N, L)
        rows = hit.any(1)
        mass = (alphas * hit[:, None, :]).sum(-1)[rows]      # (n_w, K)
        s = mass.mean(0)
        s_hat = torch.softmax(s, 0)
        out[word] = WordScore(word, int(rows.sum()), s.numpy(),
                              float(s_hat[:num_blocks].sum()), float(s_hat[num_blocks:].sum()))
    return out


def write_word_scores(path, scores: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["word", "count", "backbone", "interaction"])
        for word in sorted(scores):
            s = scores[word]
            w.writerow([word, s.count, repr(s.backbone), repr(s.interaction)])


def write_statistics(out_dir, stats: GateStatistics, cfg: SupernetConfig):
    """Per-gate rate table plus count histograms as CSV files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "gate_rates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gate", "rate"])
        for name, rate in zip(stats.names, stats.rates):
            w.writerow([name, repr(float(rate))])
    with open(out / "layer_count_hist.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        bb = histogram(stats.layer_counts[:, 0], cfg.num_blocks)
        it = histogram(stats.layer_counts[:, 1], cfg.num_sublayers)
        w.writerow(["count", "backbone_layers", "interaction_layers"])
        for k in range(max(len(bb), len(it))):
            w.writerow([k, int(bb[k]) if k < len(bb) else 0, int(it[k]) if k < len(it) else 0])
    with open(out / "filter_count_hist.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block", "count", "expressions"])
        for b, c in enumerate(cfg.filter_counts):
            for k, n in enumerate(histogram(stats.filter_counts[:, b], c)):
                w.writerow([b, k, int(n)])
    summary = {
        "expressions": int(stats.layer_counts.shape[0]),
        "distinct_patterns": stats.distinct_patterns,
        "never_selected": stats.never_selected,
        "always_selected": stats.always_selected,
        "mean_backbone_layers": float(stats.layer_counts[:, 0].mean()),
        "mean_interaction_layers": float(stats.layer_counts[:, 1].mean()),
        "mean_filters": float(stats.filter_counts.sum(1).mean()),
    }
    return summary
