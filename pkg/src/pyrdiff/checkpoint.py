"""Bit-exact checkpoint archive.

An archive is a directory holding ``manifest.json`` (config snapshot,
step count, metric history, tensor name list) plus one blob file per
named tensor.  A blob is a single JSON header line {name, shape, dtype,
byte_order} followed by the raw little-endian float32 row-major bytes,
so a round trip reproduces every tensor bitwise with no pickle in the
loop.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

__all__ = [
    "MANIFEST_NAME",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "module_tensors",
    "load_into_module",
]

MANIFEST_NAME = "manifest.json"


@dataclass
class Checkpoint:
    """In-memory view of a loaded archive."""

    tensors: dict[str, torch.Tensor]
    config: dict
    step: int
    metrics: list = field(default_factory=list)


def _blob_path(dirpath: str, name: str) -> str:
    return os.path.join(dirpath, name + ".bin")


def save_checkpoint(
    dirpath: str,
    tensors: dict[str, torch.Tensor],
    config: dict,
    step: int,
    metrics: list | None = None,
) -> str:
    """Write an archive; returns the directory path."""
    if not tensors:
        raise ValueError("refusing to write an empty checkpoint")
    os.makedirs(dirpath, exist_ok=True)
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype != torch.float32:
            raise ValueError(f"checkpoints store float32 tensors only; {name!r} is {t.dtype}")
        header = {
            "name": name,
            "shape": list(t.shape),
            "dtype": "float32",
            "byte_order": "little",
        }
        with open(_blob_path(dirpath, name), "wb") as fh:
            fh.write((json.dumps(header) + "\n").encode("utf-8"))
            fh.write(t.numpy().astype("<f4", copy=False).tobytes())
    manifest = {
        "step": int(step),
        "tensors": sorted(tensors),
        "config": config,
        "metrics": list(metrics or []),
    }
    with open(os.path.join(dirpath, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return dirpath


def _read_blob(dirpath: str, name: str) -> torch.Tensor:
    path = _blob_path(dirpath, name)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("name") != name:
        raise ValueError(f"blob {path} names tensor {header.get('name')!r}, expected {name!r}")
    if header.get("dtype") != "float32" or header.get("byte_order") != "little":
        raise ValueError(f"blob {path} is not little-endian float32")
    shape = tuple(int(s) for s in header["shape"])
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if len(payload) != 4 * count:
        raise ValueError(f"blob {path} holds {len(payload)} bytes, expected {4 * count}")
    arr = np.frombuffer(payload, dtype="<f4", count=count).reshape(shape)
    return torch.from_numpy(arr.astype(np.float32, copy=True))


def load_checkpoint(dirpath: str) -> Checkpoint:
    manifest_path = os.path.join(dirpath, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    names = manifest["tensors"]
    missing = [n for n in names if not os.path.isfile(_blob_path(dirpath, n))]
    if missing:
        raise ValueError(f"manifest lists tensors with no blob on disk: {missing}")
    tensors = {name: _read_blob(dirpath, name) for name in names}
    return Checkpoint(
        tensors=tensors,
        config=manifest.get("config", {}),
        step=int(manifest["step"]),
        metrics=list(manifest.get("metrics", [])),
    )


def module_tensors(module: nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    """All parameters and buffers of a module, optionally name-prefixed."""
    out = {}
    for name, t in module.state_dict().items():
        out[prefix + name] = t.detach().clone()
    return out


def load_into_module(module: nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    """Load the ``prefix``-scoped subset of checkpoint tensors, strictly."""
    state = {}
    for name, t in tensors.items():
        if name.startswith(prefix):
            state[name[len(prefix) :]] = t
    if not state:
        raise ValueError(f"checkpoint holds no tensors under prefix {prefix!r}")
    module.load_state_dict(state, strict=True)
