"""Checkpoint container: ``metadata.json`` + ``tensors.safetensors``.

The tensor blob stores named float32 little-endian tensors with their shapes
(safetensors layout). Metadata holds config, schema, RNG states and loss
history; it is written with sorted keys so identical runs give identical bytes.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch
from safetensors.numpy import load_file, save_file

from .errors import CheckpointError

FORMAT_VERSION = 1
META_FILE = "metadata.json"
TENSOR_FILE = "tensors.safetensors"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, tensors: dict[str, torch.Tensor | np.ndarray], metadata: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arrays[name] = np.ascontiguousarray(arr, dtype="<f4")
    save_file(arrays, str(path / TENSOR_FILE))
    meta = {"format_version": FORMAT_VERSION, **metadata}
    tmp = path / (META_FILE + ".tmp")
    tmp.write_text(json.dumps(meta, indent=1, sort_keys=True))
    os.replace(tmp, path / META_FILE)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    try:
        meta = json.loads((path / META_FILE).read_text())
        arrays = load_file(str(path / TENSOR_FILE))
    except FileNotFoundError as e:
        raise CheckpointError(f"incomplete checkpoint at {path}: {e.filename}") from e
    except (json.JSONDecodeError, Exception) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"corrupted checkpoint at {path}: {e}") from e
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format_version {meta.get('format_version')}, expected {FORMAT_VERSION}")
    return {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}, meta


def torch_rng_state() -> str:
    return base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode()


def set_torch_rng_state(state: str) -> None:
    buf = np.frombuffer(base64.b64decode(state), dtype=np.uint8).copy()
    torch.set_rng_state(torch.from_numpy(buf))
