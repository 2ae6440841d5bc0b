"""Reproducibility manifests written next to every CLI output.

A manifest records the tool version, subcommand, fully resolved
configuration, SHA-256 digests of the inputs, the PRNG seed and timing /
host information. Re-running a seeded command with the same configuration
reproduces outputs bit-for-bit; only the ``timings`` and ``host`` sections
are expected to differ between runs.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
import tempfile
from pathlib import Path

from .errors import IoFailure

TOOL_NAME = "petseg"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    except OSError as exc:
        raise IoFailure(f"cannot digest {path}: {exc}") from exc
    return h.hexdigest()


def manifest_path_for(target) -> Path:
    """Directory outputs get ``run_manifest.json`` inside; file outputs a
    sibling ``<name>.manifest.json``."""
    target = Path(target)
    if target.is_dir():
        return target / "run_manifest.json"
    return target.parent / (target.name + ".manifest.json")


def write_run_manifest(target, subcommand: str, config: dict, inputs=(), seed=None,
                       timings: dict | None = None, extra: dict | None = None) -> Path:
    from . import __version__

    doc = {
        "tool": TOOL_NAME,
        "version": __version__,
        "subcommand": subcommand,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "seed": seed,
        "timings": timings or {},
        "host": {
            "platform": platform.platform(),
            "python": platform.python_version(),
            "machine": platform.machine(),
        },
    }
    if extra:
        doc["result"] = extra
    path = manifest_path_for(target)
    payload = (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc
    return path
