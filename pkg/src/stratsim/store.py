"""On-disk stage records.

Each stage writes ``<stage>.json`` (a plain-text header describing the
layout, the config hash and the hash of the upstream stage) and
``<stage>.bin`` (the arrays back to back as little-endian doubles). Integer
arrays are stored as doubles too; every count used here is far below 2**53.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

__all__ = ["StageError", "StaleStageError", "write_stage", "read_stage", "stage_hash", "config_hash",
           "stage_exists"]

FORMAT_VERSION = 1


class StageError(RuntimeError):
    pass


class StaleStageError(StageError):
    pass


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _paths(root, stage):
    root = Path(root)
    return root / f"{stage}.json", root / f"{stage}.bin"


def stage_exists(root, stage) -> bool:
    h, b = _paths(root, stage)
    return h.exists() and b.exists()


def stage_hash(root, stage) -> str:
    h, b = _paths(root, stage)
    d = hashlib.sha256()
    d.update(h.read_bytes())
    d.update(b.read_bytes())
    return d.hexdigest()[:16]


def write_stage(root, stage: str, arrays: dict, meta: dict, cfg_hash: str, upstream: str | None = None):
    """Write a stage atomically; returns its hash."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    layout = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        layout.append({"name": name, "shape": list(a.shape), "offset": offset, "dtype": "<f8"})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = {
        "format": FORMAT_VERSION,
        "stage": stage,
        "config_hash": cfg_hash,
        "upstream_hash": upstream,
        "layout": layout,
        "meta": meta,
    }
    hpath, bpath = _paths(root, stage)
    for path, data in ((bpath, b"".join(chunks)),
                       (hpath, (json.dumps(header, indent=1, sort_keys=True, default=_jsonable) + "\n").encode())):
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)
    return stage_hash(root, stage)


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def read_stage(root, stage: str, upstream: str | None = None, expect_upstream_hash: str | None = None):
    """Load ``(arrays, meta, header)``; checks the recorded upstream hash when given."""
    hpath, bpath = _paths(root, stage)
    if not (hpath.exists() and bpath.exists()):
        raise StageError(f"stage '{stage}' has not been run in {root}")
    header = json.loads(hpath.read_text())
    if expect_upstream_hash is not None and header.get("upstream_hash") != expect_upstream_hash:
        raise StaleStageError(f"stage '{stage}' was built from a different '{upstream}' stage; rerun it")
    raw = bpath.read_bytes()
    arrays = {}
    for item in header["layout"]:
        n = int(np.prod(item["shape"])) if item["shape"] else 1
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=item["offset"])
        arrays[item["name"]] = a.reshape(item["shape"]).astype(float)
    return arrays, header["meta"], header
