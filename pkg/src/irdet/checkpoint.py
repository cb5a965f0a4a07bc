"""Checkpoint directory format: JSON manifest plus one flat parameter blob.

``manifest.json`` records the architecture hyper-parameters, seed, epoch, and
an index of named arrays; ``params.bin`` concatenates the arrays as
little-endian 32-bit floats in index order. Optimizer momentum buffers are
stored alongside model parameters under an ``optim.`` prefix.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


def _collect_arrays(model: torch.nn.Module,
                    optimizer: Optional[torch.optim.Optimizer]) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        arrays[name] = tensor.detach().cpu().numpy().astype("<f4", copy=False)
    if optimizer is not None:
        params = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p, {})
                buf = state.get("momentum_buffer")
                if buf is not None and id(p) in params:
                    arrays[f"optim.{params[id(p)]}.momentum"] = \
                        buf.detach().cpu().numpy().astype("<f4", copy=False)
    return arrays


def save_checkpoint(directory: str | Path, model: torch.nn.Module,
                    arch: Dict, epoch: int, seed: int,
                    optimizer: Optional[torch.optim.Optimizer] = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = _collect_arrays(model, optimizer)
    index = []
    offset = 0
    chunks = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape),
                      "offset": offset, "numel": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size * 4
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "epoch": int(epoch),
        "seed": int(seed),
        "arch": arch,
        "dtype": "<f4",
        "params": index,
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    (directory / BLOB_NAME).write_bytes(b"".join(chunks))


def load_manifest(directory: str | Path) -> Dict:
    manifest = json.loads((Path(directory) / MANIFEST_NAME).read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {manifest.get('schema_version')}")
    return manifest


def load_arrays(directory: str | Path) -> Tuple[Dict, Dict[str, np.ndarray]]:
    directory = Path(directory)
    manifest = load_manifest(directory)
    blob = (directory / BLOB_NAME).read_bytes()
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        start = entry["offset"]
        count = entry["numel"]
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        arrays[entry["name"]] = flat.reshape(entry["shape"]).copy()
    return manifest, arrays


def load_checkpoint(directory: str | Path, model: torch.nn.Module,
                    optimizer: Optional[torch.optim.Optimizer] = None) -> Dict:
    """Restore model (and optimizer momentum) state; returns the manifest."""
    manifest, arrays = load_arrays(directory)
    state = {}
    for name, arr in arrays.items():
        if not name.startswith("optim."):
            state[name] = torch.from_numpy(arr)
    model.load_state_dict(state, strict=True)
    if optimizer is not None:
        named = dict(model.named_parameters())
        for name, arr in arrays.items():
            if not name.startswith("optim."):
                continue
            param_name = name[len("optim."):-len(".momentum")]
            param = named.get(param_name)
            if param is None:
                raise ValueError(f"momentum buffer for unknown parameter {param_name}")
            optimizer.state[param] = {"momentum_buffer": torch.from_numpy(arr)}
    return manifest
