"""Atomic file output and run manifests."""

from __future__ import annotations

import hashlib
import json
import os
import platform
import tempfile
from pathlib import Path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_path(path) -> str:
    """sha256 of a file, or of a directory's sorted (relative path, sha256) listing."""
    path = Path(path)
    if path.is_file():
        return sha256_file(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file() and not p.name.endswith(".manifest.json")
                    and p.name != "manifest.json"):
        h.update(f"{f.relative_to(path).as_posix()}\0{sha256_file(f)}\n".encode())
    return h.hexdigest()


def versions() -> dict:
    import numpy
    import scipy
    import skimage
    import sklearn

    from . import __version__

    return {
        "adaptseg": __version__,
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "scikit-image": skimage.__version__,
        "scikit-learn": sklearn.__version__,
    }


def manifest_path(output) -> Path:
    output = Path(output)
    return output / "manifest.json" if output.is_dir() else output.with_name(output.name + ".manifest.json")


def write_manifest(output, command: str, inputs: dict, params: dict, failures=()) -> Path:
    """Record inputs (by content digest), parameters and library versions.

    Timestamps and absolute paths are left out so reruns produce identical
    manifests.
    """
    doc = {
        "command": command,
        "inputs": {name: {"name": Path(p).name, "sha256": digest_path(p)}
                   for name, p in sorted(inputs.items()) if p is not None and Path(p).exists()},
        "params": params,
        "failures": list(failures),
        "versions": versions(),
    }
    return atomic_write_text(manifest_path(output), json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
