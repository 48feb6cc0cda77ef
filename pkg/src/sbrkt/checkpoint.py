"""Self-describing binary checkpoint container.

Layout: magic line, one JSON header line (format version, config
key-values, parameter manifest with shapes), then each parameter's flat
float64 little-endian values in manifest order. Writing is deterministic,
so identical parameters produce byte-identical files.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"SBRKT-CKPT\n"
FORMAT_VERSION = "1"

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config: dict, arrays: dict) -> None:
    """Write named float64 arrays plus a flat config mapping."""
    manifest = [
        {"name": name, "shape": list(np.asarray(arr).shape)} for name, arr in arrays.items()
    ]
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "params": manifest,
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (config dict, {name: float64 array})."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {header.get('format_version')!r}"
            )
        arrays = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise CheckpointError(f"{path}: truncated data for {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header["config"], arrays
