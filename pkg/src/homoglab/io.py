"""Persistence: checksummed binary arrays, CSV/JSON tables and a Gaussian-field cache.

Binary arrays are raw little-endian float64 with a JSON sidecar holding the
shape and the SHA-256 of the bytes. Text output writes floats with ``repr``
precision, which round-trips exactly.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np

from .gaussian_field import (GaussianFieldSample, build_gaussian_field, coefficient_from_field,
                             sample_white_noise)

log = logging.getLogger(__name__)

CACHE_ENV = "HOMOGLAB_CACHE"


class ChecksumError(IOError):
    """Stored bytes do not match the checksum in their sidecar."""


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_array(path: str | Path, array: np.ndarray, meta: dict | None = None) -> Path:
    """Write ``path`` (raw ``<f8``) and ``path.json``; returns the sidecar path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(array, dtype="<f8")
    blob = data.tobytes()
    path.write_bytes(blob)
    side = {"shape": list(data.shape), "dtype": "<f8",
            "sha256": hashlib.sha256(blob).hexdigest(), "meta": meta or {}}
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(side, indent=2, sort_keys=True))
    return sidecar


def read_array(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read an array written by :func:`write_array`, verifying its checksum."""
    path = Path(path)
    side = json.loads(path.with_name(path.name + ".json").read_text())
    blob = path.read_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != side["sha256"]:
        raise ChecksumError(f"{path}: checksum mismatch (stored {side['sha256'][:12]}, "
                            f"found {digest[:12]})")
    arr = np.frombuffer(blob, dtype="<f8").reshape(side["shape"]).astype(float)
    return arr, side.get("meta", {})


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"cannot serialise {type(x).__name__}")


def write_csv(path: str | Path, rows: list[dict], header: list[str] | None = None) -> Path:
    """Rows of dicts to CSV; floats are written with ``repr`` precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if header is None:
        header = []
        for r in rows:
            header.extend(k for k in r if k not in header)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in r.items()})
    return path


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def manifest(paths, root: str | Path) -> dict:
    """Content addresses ``{relative path: sha256}`` of output files."""
    root = Path(root)
    return {str(Path(p).relative_to(root)): sha256_file(p) for p in sorted(map(str, paths))}


# ---------------------------------------------------------------- field cache

class FieldCache:
    """On-disk cache of Gaussian field samples keyed by grid, kernel and seed.

    Used as ``field_cache`` in :func:`homoglab.fluctuations.run_ensemble`;
    calling it returns the coefficient field of a seed. A cached file whose
    checksum does not match raises :class:`ChecksumError` rather than being
    silently regenerated.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @classmethod
    def from_env(cls) -> "FieldCache | None":
        root = os.environ.get(CACHE_ENV)
        return cls(root) if root else None

    def path(self, config, seed: int) -> Path:
        g = config.grid
        key = f"d{g.d}-N{g.N}-L{g.L!r}-k{config.kernel().digest}-c{config.kappa}"
        return self.root / key / f"seed-{seed}.f64"

    def field(self, config, seed: int) -> GaussianFieldSample:
        p = self.path(config, seed)
        grid = config.grid
        kern = config.kernel()
        if p.exists():
            vals, _ = read_array(p)
            return GaussianFieldSample(grid, vals, seed, kern.digest)
        G = build_gaussian_field(sample_white_noise(grid, config.kappa, seed), kern)
        write_array(p, G.values, {"seed": seed, "kernel": kern.digest, "grid": grid.to_dict()})
        return G

    def __call__(self, config, seed: int):
        return coefficient_from_field(self.field(config, seed), config.coefficient)

    def __getstate__(self):
        return {"root": str(self.root)}

    def __setstate__(self, state):
        self.root = Path(state["root"])
