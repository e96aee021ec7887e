"""Dense float64 arrays, the seeded RNG, and the raw tensor file format.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. The helpers here add the few guarantees numpy does not give by default:
sequential, fixed-order reductions and a documented, counted random stream.

The RNG is numpy's PCG64 (O'Neill's permuted congruential generator, 128-bit
state, XSL-RR output). Its output stream is bit-exact across platforms for a
given seed. Per-sample substreams are derived from ``(seed, index)`` through
``numpy.random.SeedSequence`` spawn keys.
"""

from __future__ import annotations

import json
import math
import operator
from functools import reduce as _fold
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float64
MAX_ELEMENTS = 2**40


class ShapeError(ValueError):
    pass


class AxisError(ValueError):
    pass


class SizeError(ValueError):
    pass


class RangeError(ValueError):
    pass


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in shape {shape}")
    n = _fold(operator.mul, shape, 1)
    if n > MAX_ELEMENTS:
        raise SizeError(f"shape {shape} has {n} elements (limit {MAX_ELEMENTS})")
    return shape


def tensor_new(shape: Sequence[int], fill: float = 0.0) -> np.ndarray:
    return np.full(_check_shape(shape), fill, dtype=DTYPE)


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    a = np.array(data, dtype=DTYPE, order="C")
    if shape is not None:
        a = a.reshape(_check_shape(shape))
    return a


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if op not in _OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return _OPS[op](a, b, dtype=DTYPE)


def _seq_sum(a: np.ndarray, axis: int) -> np.ndarray:
    # cumsum accumulates strictly left to right, unlike np.sum's pairwise scheme
    if a.shape[axis] == 0:
        return np.zeros(a.shape[:axis] + a.shape[axis + 1:], dtype=DTYPE)
    return np.take(np.cumsum(a, axis=axis, dtype=DTYPE), -1, axis=axis)


def reduce(a: np.ndarray, op: str, axes: Iterable[int]) -> np.ndarray:
    """Reduce ``a`` over ``axes`` with sequential ascending-index accumulation.

    Summing over several axes folds them in row-major order, so a reduction over
    every axis equals a left fold over the flat data, bit for bit.
    """
    axes = [int(ax) for ax in axes]
    nd = a.ndim
    norm = []
    for ax in axes:
        if not -nd <= ax < nd:
            raise AxisError(f"axis {ax} out of range for {nd}-d tensor")
        norm.append(ax % nd)
    if len(set(norm)) != len(norm):
        raise AxisError(f"repeated axes {axes}")
    if op not in ("sum", "mean", "max"):
        raise ValueError(f"unknown reduction {op!r}")

    keep = [ax for ax in range(nd) if ax not in norm]
    moved = np.transpose(a, keep + sorted(norm))
    count = int(np.prod([a.shape[ax] for ax in norm], dtype=np.int64))
    flat = moved.reshape([a.shape[ax] for ax in keep] + [count])
    if op == "max":
        if count == 0:
            raise AxisError("max over an empty extent is undefined")
        return np.max(flat, axis=-1)
    total = _seq_sum(flat, -1)
    if op == "sum":
        return total
    if count == 0:
        raise AxisError("mean over an empty extent is undefined")
    return total / count


def flat_index(idx: Sequence[int], shape: Sequence[int]) -> int:
    return int(np.ravel_multi_index(tuple(idx), tuple(shape)))


def unflat_index(offset: int, shape: Sequence[int]) -> tuple[int, ...]:
    return tuple(int(i) for i in np.unravel_index(offset, tuple(shape)))


class Rng:
    """Seeded PCG64 stream that counts how many samples it has emitted."""

    algorithm = "PCG64"

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(spawn_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(ss))
        self.draws = 0

    def substream(self, *key: int) -> "Rng":
        """Independent stream for ``(seed, *spawn_key, *key)``; does not advance self."""
        return Rng(self.seed, self.spawn_key + tuple(int(k) for k in key))

    def uniform(self, lo: float, hi: float, shape: Sequence[int] = ()) -> np.ndarray:
        return rng_uniform(self, lo, hi, shape)

    def integers(self, lo: int, hi: int, size: int | None = None):
        """Integers in ``[lo, hi]`` inclusive."""
        out = self._gen.integers(lo, hi, size=size, endpoint=True)
        self.draws += 1 if size is None else int(size)
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)

    def random(self) -> float:
        self.draws += 1
        return float(self._gen.random())

    def __repr__(self):
        return f"Rng({self.algorithm}, seed={self.seed}, key={self.spawn_key}, draws={self.draws})"


def rng_uniform(rng: Rng, lo: float, hi: float, shape: Sequence[int] = ()) -> np.ndarray:
    if not lo < hi:
        raise RangeError(f"need lo < hi, got [{lo}, {hi})")
    shape = _check_shape(shape)
    out = rng._gen.uniform(lo, hi, size=shape)
    rng.draws += int(np.prod(shape, dtype=np.int64))
    # uniform(lo, hi) can round up to hi for some (lo, hi); keep the half-open contract
    return np.where(out >= hi, np.nextafter(hi, lo), out).astype(DTYPE)


# -- raw tensor files: <name>.bin (little-endian f64, row-major) + <name>.json sidecar


def save_tensor(path: str | Path, a: np.ndarray) -> list[Path]:
    """Write ``path`` (raw data) and ``path`` with a ``.json`` suffix (shape sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    a = np.ascontiguousarray(a, dtype="<f8")
    path.write_bytes(a.tobytes(order="C"))
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({"shape": list(a.shape), "dtype": "f64"}))
    return [path, sidecar]


def load_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("dtype") != "f64":
        raise ValueError(f"{path}: unsupported dtype {meta.get('dtype')!r}")
    shape = _check_shape(meta["shape"])
    raw = path.read_bytes()
    expected = 8 * math.prod(shape)
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for shape {shape}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(shape)
