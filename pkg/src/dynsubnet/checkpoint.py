"""Checkpoints: a JSON manifest plus one little-endian float32 blob.

Layout of a checkpoint directory::

    manifest.json   {"tensors": [{"name", "shape", "dtype", "offset"}, ...],
                     "config": "...", "step": int, "epoch": int, "rng": {...}}
    params.bin      concatenated tensor bytes, '<f4'
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig

MANIFEST = "manifest.json"
BLOB = "params.bin"


def save(path, model: torch.nn.Module, config: RunConfig, step: int = 0, epoch: int = 0,
         rng: dict | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        data = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        chunks.append(data)
        offset += len(data)
    with open(path / BLOB, "wb") as fh:
        for c in chunks:
            fh.write(c)
    manifest = {"tensors": entries, "config": config.dumps(), "step": step, "epoch": epoch,
                "rng": rng or {"seed": config.seed}}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def read(path):
    """(manifest, {name: float32 tensor})."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as err:
        raise FileNotFoundError(f"not a checkpoint directory: {path}") from err
    tensors = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "float32":
            raise ValueError(f"unsupported dtype {e['dtype']!r} for {e['name']}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * count
        if end > len(blob):
            raise ValueError(f"checkpoint blob truncated at tensor {e['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))
    return manifest, tensors


def load_model(path):
    """Rebuild the model stored at ``path``; returns (model, config, manifest)."""
    from .model import GroundingModel

    manifest, tensors = read(path)
    config = RunConfig.loads(manifest["config"])
    model = GroundingModel(config.supernet(), config.gate_mix_granularity)
    model.load_state_dict(tensors)
    model.eval()
    return model, config, manifest
