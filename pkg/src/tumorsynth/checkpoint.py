"""Checkpoint container (safetensors + JSON config metadata) and CSV training logs."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List, Tuple

import torch
from safetensors import safe_open
from safetensors.torch import save_file


META_KEY = "tumorsynth"


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, module: torch.nn.Module, kind: str, config: dict) -> Path:
    path = Path(path)
    state = {k: v.detach().contiguous().cpu() for k, v in module.state_dict().items()}
    # one metadata key: the writer does not preserve key order, which would change the file bytes
    meta = {META_KEY: json.dumps({"kind": kind, "config": config}, sort_keys=True)}
    save_file(state, str(path), metadata=meta)
    return path


def load_checkpoint(path, kind: str) -> Tuple[dict, Dict[str, torch.Tensor]]:
    """Return ``(config, state_dict)`` for a checkpoint of the given kind."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as fh:
            meta = json.loads((fh.metadata() or {}).get(META_KEY, "{}"))
            state = {k: fh.get_tensor(k) for k in fh.keys()}
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {meta.get('kind')!r} checkpoint, expected {kind!r}")
    return meta["config"], state


def write_log(path, rows: List[dict]) -> Path:
    path = Path(path)
    if not rows:
        path.write_text("")
        return path
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def read_log(path) -> List[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def check_finite(value: float, where: str) -> None:
    if not torch.isfinite(torch.as_tensor(value)):
        raise TrainingDivergedError(f"non-finite loss ({value}) at {where}")
