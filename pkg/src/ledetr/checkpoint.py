"""Checkpoint serialization: concatenated binary tensor dumps plus a
plain-text manifest of (name, shape, byte offset) lines."""

from __future__ import annotations

import os

import numpy as np

from .errors import ShapeError
from .tensor import load_tensor, save_tensor

WEIGHTS_FILE = "weights.bin"
MANIFEST_FILE = "manifest.txt"


def save_checkpoint(out_dir: str, named_params) -> list[tuple[str, tuple[int, ...], int]]:
    """Write every (name, array) pair in order; returns the manifest entries."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = []
    with open(os.path.join(out_dir, WEIGHTS_FILE), "wb") as f:
        for name, arr in named_params:
            manifest.append((name, tuple(arr.shape), f.tell()))
            save_tensor(f, arr)
    with open(os.path.join(out_dir, MANIFEST_FILE), "w") as f:
        for name, shape, offset in manifest:
            f.write(f"{name}\t{','.join(str(e) for e in shape)}\t{offset}\n")
    return manifest


def read_manifest(out_dir: str) -> list[tuple[str, tuple[int, ...], int]]:
    entries = []
    with open(os.path.join(out_dir, MANIFEST_FILE)) as f:
        for line in f:
            name, shape, offset = line.rstrip("\n").split("\t")
            entries.append((name, tuple(int(e) for e in shape.split(",")), int(offset)))
    return entries


def load_checkpoint(out_dir: str) -> dict[str, np.ndarray]:
    """Read back every tensor, restored to its manifest shape."""
    entries = read_manifest(out_dir)
    params = {}
    with open(os.path.join(out_dir, WEIGHTS_FILE), "rb") as f:
        for name, shape, offset in entries:
            f.seek(offset)
            arr = load_tensor(f)
            if int(np.prod(shape)) != arr.size:
                raise ShapeError(f"manifest shape {shape} does not match record for {name}")
            params[name] = arr.reshape(shape)
    return params


def manifest_param_total(out_dir: str) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in read_manifest(out_dir))
