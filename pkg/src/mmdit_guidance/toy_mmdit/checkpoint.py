"""Checkpoint directories: ``manifest.json`` plus one raw float32 blob per parameter.

Blobs are little-endian IEEE-754 single precision in row-major order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetConfig
from .model import ModelConfig, ToyMMDiT
from .tokenizer import Tokenizer
from .training import Checkpoint

FORMAT = "toy-mmdit-checkpoint/1"
DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, tensor in ckpt.model.state_dict().items():
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy().astype(DTYPE))
        fname = f"params/{name}.bin"
        (path / fname).write_bytes(arr.tobytes(order="C"))
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "file": fname})
    manifest = {
        "format": FORMAT,
        "model_config": ckpt.model.config.to_dict(),
        "dataset_config": ckpt.dataset_config.to_dict(),
        "tokenizer": ckpt.tokenizer.to_dict(),
        "parameters": entries,
        "history": ckpt.history,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as err:
        raise CheckpointError(f"no manifest.json in {path}") from err
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    config = ModelConfig.from_dict(manifest["model_config"])
    model = ToyMMDiT(config)
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    entries = {e["name"]: e for e in manifest["parameters"]}
    if set(entries) != set(expected):
        missing = sorted(set(expected) - set(entries))
        extra = sorted(set(entries) - set(expected))
        raise CheckpointError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, e in entries.items():
        if tuple(e["shape"]) != expected[name]:
            raise CheckpointError(f"parameter {name}: manifest shape {e['shape']} != model shape {expected[name]}")
        size = int(np.prod(e["shape"], dtype=np.int64)) * DTYPE.itemsize
        blob = path / e["file"]
        if not blob.is_file() or blob.stat().st_size != size:
            raise CheckpointError(f"parameter {name}: blob {e['file']} missing or not {size} bytes")
    state = {}
    for name, e in entries.items():
        arr = np.fromfile(path / e["file"], dtype=DTYPE).reshape(e["shape"])
        state[name] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    model.eval()
    tokenizer = Tokenizer.from_dict(manifest["tokenizer"])
    dataset_config = DatasetConfig.from_dict(manifest["dataset_config"])
    return Checkpoint(model, tokenizer, dataset_config, manifest.get("history", []))
