"""Checkpoint format: JSON header + flat little-endian float32 payload.

Layout: 8-byte little-endian header length, UTF-8 JSON header listing
parameter names and shapes in payload order, then the raw float32 values.
Values are stored at float32 regardless of compute dtype, so a
save/load/save cycle is byte-identical.
"""

import json
import struct

import numpy as np

FORMAT_NAME = "tvlp-checkpoint"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, named_arrays):
    """Write ``{name: array}`` (or an iterable of pairs) to ``path``."""
    items = list(named_arrays.items()) if hasattr(named_arrays, "items") else list(named_arrays)
    header = {
        "format": FORMAT_NAME,
        "version": 1,
        "params": [{"name": name, "shape": list(np.asarray(arr).shape)} for name, arr in items],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in items:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns ``{name: float32 ndarray}`` in file order."""
    with open(path, "rb") as fh:
        raw = fh.read(8)
        if len(raw) != 8:
            raise CheckpointError(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<Q", raw)
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format") != FORMAT_NAME:
            raise CheckpointError(f"{path}: unrecognized checkpoint format")
        out = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise CheckpointError(f"{path}: truncated payload at '{entry['name']}'")
            out[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after payload")
    return out


def save_module(path, module):
    save_checkpoint(path, {name: p.data for name, p in module.named_parameters()})


def load_module(path, module):
    """Load a checkpoint into a module; names and shapes must match exactly."""
    stored = load_checkpoint(path)
    params = dict(module.named_parameters())
    if set(stored) != set(params):
        missing = sorted(set(params) - set(stored))
        extra = sorted(set(stored) - set(params))
        raise CheckpointError(f"parameter name mismatch (missing={missing}, extra={extra})")
    for name, arr in stored.items():
        p = params[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(f"shape mismatch for '{name}': {arr.shape} vs {p.shape}")
        p.data = arr.astype(p.data.dtype)
