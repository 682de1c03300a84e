"""Self-describing model checkpoints.

A checkpoint is one JSON document carrying everything needed to rebuild a
fitted model: the model dimensions, the normalization statistics, and every
parameter tensor with its shape.  Serialization sorts keys, so saving the
same state twice produces identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import numerics as nm
from .data import DatasetStats
from .model import ModelConfig, check_params
from .numerics import Var

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """The file is not a usable checkpoint."""


def save_checkpoint(path, params: dict[str, Var], model_cfg: ModelConfig,
                    stats: DatasetStats) -> None:
    check_params(params, model_cfg)
    payload = {
        "format_version": FORMAT_VERSION,
        "model_config": model_cfg.to_dict(),
        "stats": stats.to_dict(),
        "params": {
            name: {
                "shape": list(var.value.shape),
                "data": var.value.reshape(-1).tolist(),
            }
            for name, var in params.items()
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, Var], ModelConfig, DatasetStats]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict) or "format_version" not in raw:
        raise CheckpointError(f"{path}: missing format_version")
    if raw["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {raw['format_version']} unsupported "
            f"(this build reads {FORMAT_VERSION})"
        )
    try:
        model_cfg = ModelConfig.from_dict(raw["model_config"])
        stats = DatasetStats.from_dict(raw["stats"])
        params = {}
        for name, entry in raw["params"].items():
            arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            params[name] = nm.param(arr)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    try:
        check_params(params, model_cfg)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return params, model_cfg, stats
