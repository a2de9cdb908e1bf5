"""Canonical JSON artifacts, content fingerprints and run manifests."""
from __future__ import annotations

import hashlib
import json
import os
import platform
from pathlib import Path
from typing import Mapping

import numpy as np


class FingerprintError(ValueError):
    """An artifact was produced from different inputs than the ones supplied."""


def canonical_json(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def json_digest(doc) -> str:
    return hashlib.sha256(canonical_json(doc)).hexdigest()


def array_digest(arrays: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and raw float64 bytes of each array, in key order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype=np.float64)
        h.update(name.encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def write_json(path, doc) -> Path:
    """Write ``doc`` deterministically; the file is replaced atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(json.dumps(doc, sort_keys=True, indent=1, allow_nan=False).encode("utf-8") + b"\n")
    os.replace(tmp, path)
    return path


def read_json(path) -> dict:
    with Path(path).open(encoding="utf-8") as fh:
        return json.load(fh)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command: str, inputs: Mapping[str, str], outputs: list[str], config: dict, seed: int, wall_time: float) -> Path:
    """Record what a subcommand consumed and produced.

    Inputs and outputs are stored with their content digests so a chain of
    manifests can be re-validated later. Wall time is the only
    non-reproducible field.
    """
    out_dir = Path(out_dir)
    doc = {
        "schema": "manifest/1",
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": file_digest(v)} for k, v in sorted(inputs.items())},
        "outputs": {str(p): file_digest(out_dir / p) for p in sorted(outputs)},
        "wall_time_s": round(wall_time, 3),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    return write_json(out_dir / f"manifest_{command}.json", doc)


def verify_manifest(path) -> list[str]:
    """Return a list of problems (empty when every recorded digest still matches)."""
    path = Path(path)
    doc = read_json(path)
    problems = []
    for key, rec in doc["inputs"].items():
        p = Path(rec["path"])
        if not p.exists():
            problems.append(f"input {key} missing: {p}")
        elif file_digest(p) != rec["sha256"]:
            problems.append(f"input {key} changed: {p}")
    for name, digest in doc["outputs"].items():
        p = path.parent / name
        if not p.exists():
            problems.append(f"output missing: {p}")
        elif file_digest(p) != digest:
            problems.append(f"output changed: {p}")
    return problems
