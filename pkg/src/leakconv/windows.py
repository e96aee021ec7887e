"""Rectangular and Hamming tapers for convolution kernels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, SizeError

HAMMING_ALPHA = 25.0 / 46.0
FAMILIES = ("rectangular", "hamming")


@dataclass(frozen=True)
class WindowSpec:
    family: str
    k_rows: int
    k_cols: int | None = None

    def __post_init__(self):
        if self.k_cols is None:
            object.__setattr__(self, "k_cols", self.k_rows)
        if self.family not in FAMILIES:
            raise ValueError(f"unknown window family {self.family!r}; expected one of {FAMILIES}")
        if self.k_rows < 1 or self.k_cols < 1:
            raise SizeError(f"window extents must be >= 1, got {self.k_rows}x{self.k_cols}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.k_rows, self.k_cols)


@dataclass(frozen=True)
class Window:
    spec: WindowSpec
    coeffs: np.ndarray = field(repr=False)


def hamming_1d(k: int) -> np.ndarray:
    """Symmetric k-tap Hamming window, alpha = 25/46, endpoints on the first/last tap.

    ``u[n] = alpha - (1 - alpha) cos(2 pi n / (k - 1))`` for ``n = 0..k-1``.
    A single tap is the degenerate window ``[1.0]``.
    """
    if k < 1:
        raise SizeError(f"window length must be >= 1, got {k}")
    if k == 1:
        return np.ones(1)
    n = np.arange(k, dtype=np.float64)
    u = HAMMING_ALPHA - (1.0 - HAMMING_ALPHA) * np.cos(2.0 * np.pi * n / (k - 1))
    # cos is not exactly mirror-symmetric in floating point
    return 0.5 * (u + u[::-1])


def make_window(spec: WindowSpec) -> Window:
    if spec.family == "rectangular":
        coeffs = np.ones(spec.shape)
    else:
        coeffs = np.outer(hamming_1d(spec.k_rows), hamming_1d(spec.k_cols))
    coeffs.setflags(write=False)
    return Window(spec, coeffs)


def apply_window(weights: np.ndarray, window: Window) -> np.ndarray:
    """Multiply every (c, m) slice of a ``[k_rows, k_cols, C, M]`` weight tensor by the window."""
    if weights.ndim < 2 or weights.shape[:2] != window.spec.shape:
        raise ShapeError(
            f"window {window.spec.shape} does not match kernel extents {weights.shape[:2]}")
    extra = (1,) * (weights.ndim - 2)
    return weights * window.coeffs.reshape(window.spec.shape + extra)
