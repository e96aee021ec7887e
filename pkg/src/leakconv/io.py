"""8-bit PGM writers for kernels, windows and spectra."""

from __future__ import annotations

from pathlib import Path

import numpy as np

SPECTRUM_FLOOR_DB = -80.0


def to_gray(a: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Map ``a`` linearly so ``lo`` -> 0 and ``hi`` -> 255 (defaults: min and max). Flat input maps to 0."""
    a = np.asarray(a, dtype=np.float64)
    lo = float(a.min()) if lo is None else lo
    hi = float(a.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    g = np.clip((a - lo) / (hi - lo), 0.0, 1.0)
    return np.rint(g * 255.0).astype(np.uint8)


def write_pgm_bytes(path: str | Path, gray: np.ndarray) -> Path:
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {gray.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = gray.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())
    return path


def write_pgm(path: str | Path, a: np.ndarray, lo: float | None = None, hi: float | None = None) -> Path:
    return write_pgm_bytes(path, to_gray(a, lo, hi))


def spectrum_db(mag: np.ndarray, floor_db: float = SPECTRUM_FLOOR_DB) -> np.ndarray:
    """20 log10(mag / max), clipped below at ``floor_db``."""
    mag = np.asarray(mag, dtype=np.float64)
    peak = mag.max()
    if peak <= 0:
        return np.full(mag.shape, floor_db)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag / peak)
    return np.maximum(db, floor_db)


def write_spectrum_pgm(path: str | Path, mag: np.ndarray, floor_db: float = SPECTRUM_FLOOR_DB) -> Path:
    return write_pgm(path, spectrum_db(mag, floor_db), floor_db, 0.0)


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)
