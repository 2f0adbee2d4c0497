"""Binary container for named tensors.

Layout: the 8-byte magic ``E2EASR01``, one line of compact JSON (the
manifest, newline-terminated), then each tensor's raw little-endian values
in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import yaml

MAGIC = b"E2EASR01"
_DTYPES = {"single": "<f4", "double": "<f8"}


class CheckpointError(ValueError):
    pass


def save(path, params: dict, model_type: str, config: dict, precision: str, extra: dict | None = None) -> dict:
    manifest = {
        "model_type": model_type,
        "precision": precision,
        "config": config,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    manifest.update(extra or {})
    dt = _DTYPES[precision]
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(header + b"\n")
        for v in params.values():
            f.write(np.ascontiguousarray(v, dtype=dt).tobytes())
    sidecar = Path(path).with_suffix(".yaml")
    sidecar.write_text(yaml.safe_dump(config, sort_keys=True), encoding="utf-8")
    return manifest


def read_manifest(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f, path)


def _read_header(f, path) -> dict:
    if f.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    line = f.readline()
    try:
        return json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})")


def load(path) -> tuple:
    """Return ``(manifest, {name: array})``."""
    with open(path, "rb") as f:
        manifest = _read_header(f, path)
        dt = np.dtype(_DTYPES[manifest["precision"]])
        params = {}
        for spec in manifest["tensors"]:
            n = int(np.prod(spec["shape"], dtype=np.int64))
            buf = f.read(n * dt.itemsize)
            if len(buf) != n * dt.itemsize:
                raise CheckpointError(f"{path}: truncated data for {spec['name']}")
            params[spec["name"]] = np.frombuffer(buf, dtype=dt).reshape(spec["shape"]).astype(dt.newbyteorder("="))
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return manifest, params
