"""Flat binary checkpoint container.

Layout (stable; version bumps on any change):

    bytes 0..3   magic b"ITCP"
    bytes 4..7   uint32 little-endian header length N
    bytes 8..8+N UTF-8 canonical JSON header:
                   {"config_hash": str, "extra": {...}, "params":
                    [{"name": str, "shape": [int...], "trainable": bool}, ...],
                    "seed": int, "step": int, "version": 1}
    then, for each entry of "params" in order, the raw float64 little-endian
    values in C order (8 * prod(shape) bytes each).

The header JSON is dumped with sorted keys and no whitespace, so identical
stores + metadata produce byte-identical files."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import Parameter, ParameterStore

MAGIC = b"ITCP"
VERSION = 1


def save_checkpoint(path, store: ParameterStore, config_hash: str = "",
                    step: int = 0, seed: int = 0, extra: dict | None = None) -> None:
    header = {
        "version": VERSION,
        "config_hash": config_hash,
        "step": int(step),
        "seed": int(seed),
        "extra": extra or {},
        "params": [
            {"name": p.name, "shape": list(p.tensor.shape), "trainable": p.trainable}
            for p in store.parameters()
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in store.parameters():
            f.write(np.ascontiguousarray(p.tensor.values, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    """Returns (store, meta) where meta holds config_hash/step/seed/extra."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("version") != VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        store = ParameterStore()
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"truncated checkpoint at parameter '{entry['name']}'")
            values = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            store.adopt(Parameter(entry["name"], values, entry["trainable"]))
    meta = {k: header[k] for k in ("config_hash", "step", "seed", "extra")}
    return store, meta
