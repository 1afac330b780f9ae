"""Report file emission: atomic writes, CSV/JSON with embedded config hash,
binary PPM rasters.

Every artifact carries the hash of the configuration that produced it; a
re-run with the same configuration reproduces the non-timing files byte for
byte, so timing always goes to its own file.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

__all__ = [
    "config_hash",
    "atomic_write_bytes",
    "atomic_write_text",
    "write_csv",
    "write_json",
    "write_ppm",
]


def config_hash(config: dict) -> str:
    """Short stable digest of a JSON-serializable configuration."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (np.floating,)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path, header: list[str], rows: list[list], cfg_hash: str) -> None:
    """CSV with a leading ``# config_hash:`` comment line and mandatory header row."""
    lines = [f"# config_hash: {cfg_hash}", ",".join(header)]
    lines.extend(",".join(_format_cell(cell) for cell in row) for row in rows)
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_json(path, payload: dict, cfg_hash: str) -> None:
    body = {"config_hash": cfg_hash, **payload}
    atomic_write_text(path, json.dumps(body, indent=1, sort_keys=True) + "\n")


def write_ppm(path, raster: np.ndarray, cfg_hash: str) -> None:
    """Binary PPM (P6, maxval 255) with the config hash as a header comment."""
    raster = np.asarray(raster)
    if raster.ndim != 3 or raster.shape[2] != 3 or raster.dtype != np.uint8:
        raise ValueError(f"raster must be uint8 with shape (h, w, 3), got {raster.dtype} {raster.shape}")
    h, w = raster.shape[:2]
    header = f"P6\n# config_hash: {cfg_hash}\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + raster.tobytes())
