"""JSON checkpoints: config, epoch, metrics and every named parameter array.

Low-rank query weights are stored as ``{d_in, d_out, rank, U, V, bias}``
objects under ``"lowrank"``; all other parameters sit in ``"parameters"``
keyed by their dotted name.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..lowrank import LowRankWeight
from .config import ExperimentConfig
from .model import EmotionModel

FORMAT = "lmam-checkpoint/1"


def checkpoint_dict(model: EmotionModel, epoch: int, metrics: dict | None = None) -> dict:
    lowrank = {}
    skip = set()
    for name, layer in model.named_layers().items():
        if isinstance(layer, LowRankWeight):
            lowrank[name] = layer.to_dict()
            skip.update(f"{name}.{p}" for p in ("U", "V", "bias"))
    params = {name: p.value.tolist() for name, p in model.named_parameters().items()
              if name not in skip}
    return {
        "format": FORMAT,
        "config": model.config.to_dict(),
        "epoch": epoch,
        "metrics": metrics or {},
        "parameters": params,
        "lowrank": lowrank,
    }


def save_checkpoint(model: EmotionModel, path, epoch: int, metrics: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(model, epoch, metrics), fh)
    return path


def model_from_checkpoint(ckpt: dict) -> EmotionModel:
    if ckpt.get("format") != FORMAT:
        raise ValueError(f"unsupported checkpoint format {ckpt.get('format')!r}")
    model = EmotionModel(ExperimentConfig.from_dict(ckpt["config"]))
    params = model.named_parameters()
    values = dict(ckpt["parameters"])
    for prefix, obj in ckpt["lowrank"].items():
        values[f"{prefix}.U"] = obj["U"]
        values[f"{prefix}.V"] = obj["V"]
        values[f"{prefix}.bias"] = obj["bias"]
    missing = set(params) - set(values)
    extra = set(values) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, p in params.items():
        arr = np.asarray(values[name], dtype=np.float64).reshape(p.shape)
        p.value[...] = arr
    return model


def load_checkpoint(path):
    """Return ``(model, checkpoint dict)``."""
    with open(path, encoding="utf-8") as fh:
        ckpt = json.load(fh)
    return model_from_checkpoint(ckpt), ckpt
