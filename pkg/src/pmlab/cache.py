"""On-disk cache for Ulam matrices.

File layout: a fixed-size little-endian header (magic, version, beta, N, rho)
followed by the row-major float64 matrix.  Cache keys hash beta (rounded to
12 decimal digits) together with the grid spec; a cached load must be
bit-identical to a fresh build.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

_MAGIC = b"PMULAM\x00\x00"
_VERSION = 1
_HEADER = struct.Struct("<8sIdQd")  # magic, version, beta, N, rho

ENV_CACHE_DIR = "PMLAB_CACHE_DIR"


class CacheCorruption(Exception):
    pass


def cache_key(beta: float, n_cells: int, rho: float) -> str:
    spec = f"beta={beta:.12f};N={n_cells};rho={rho!r}"
    return hashlib.sha256(spec.encode()).hexdigest()[:24]


def default_cache_dir() -> Path:
    env = os.environ.get(ENV_CACHE_DIR)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "pmlab"


def matrix_path(cache_dir, beta, n_cells, rho) -> Path:
    return Path(cache_dir) / f"ulam_{cache_key(beta, n_cells, rho)}.bin"


def save_matrix(path, beta: float, rho: float, matrix: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = matrix.shape[0]
    header = _HEADER.pack(_MAGIC, _VERSION, beta, n, rho)
    payload = np.ascontiguousarray(matrix, dtype="<f8").tobytes()
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def load_matrix(path, beta: float, n_cells: int, rho: float) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise CacheCorruption(f"{path}: truncated header")
        magic, version, beta_f, n, rho_f = _HEADER.unpack(raw)
        if magic != _MAGIC or version != _VERSION:
            raise CacheCorruption(f"{path}: bad magic/version")
        if n != n_cells or beta_f != beta or rho_f != rho:
            raise CacheCorruption(f"{path}: header does not match request")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n * n:
        raise CacheCorruption(f"{path}: truncated payload")
    return data.reshape(n, n).astype(float)
