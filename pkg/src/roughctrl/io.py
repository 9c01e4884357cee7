"""CSV artifacts with JSON metadata sidecars."""
from __future__ import annotations

import csv
import hashlib
import json
import platform
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"roughctrl": pkg, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


class ArtifactWriter:
    """Writes every artifact into one directory, each with a ``.meta.json`` sidecar."""

    def __init__(self, out: Path, cfg: dict, seed: int, command: str):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.meta = {"command": command, "config_sha256": config_hash(cfg), "seed": int(seed),
                     "versions": versions()}
        self.written: list[Path] = []

    def _sidecar(self, path: Path, **extra):
        meta = dict(self.meta, artifact=path.name, **extra)
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                                  encoding="utf-8")
        self.written.append(path)

    def table(self, name: str, header, rows) -> Path:
        path = self.out / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(v) for v in r])
        self._sidecar(path, rows=len(rows) if hasattr(rows, "__len__") else None)
        return path

    def dump(self, name: str, writer) -> Path:
        """Let ``writer(path)`` produce the file, then add the sidecar."""
        path = self.out / name
        writer(path)
        self._sidecar(path)
        return path

    def summary(self, name: str, data: dict) -> Path:
        path = self.out / name
        path.write_text(json.dumps(_plain(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self._sidecar(path)
        return path


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if np.isfinite(f) else None
    return obj
