"""Versioned checkpoint container: one .npz with a JSON metadata entry."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = 1
_META_KEY = "__meta__"


class CheckpointVersionError(RuntimeError):
    def __init__(self, found, expected=FORMAT_VERSION):
        super().__init__(f"checkpoint format version {found} is not supported (this build reads version {expected})")
        self.found = found
        self.expected = expected


def save_checkpoint(path, meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> Path:
    """Atomically write ``arrays`` plus JSON ``meta``; an existing file is only replaced once complete."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if _META_KEY in arrays:
        raise ValueError(f"array name {_META_KEY!r} is reserved")
    blob = json.dumps({"format_version": FORMAT_VERSION, **meta}, sort_keys=True)
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        np.savez(fh, **{_META_KEY: np.frombuffer(blob.encode(), dtype=np.uint8)}, **arrays)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        if _META_KEY not in z:
            raise CheckpointVersionError("missing")
        meta = json.loads(z[_META_KEY].tobytes().decode())
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(version)
        arrays = {k: z[k] for k in z.files if k != _META_KEY}
    return meta, arrays


def prefixed(prefix: str, state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v for k, v in state.items()}


def unprefixed(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
