"""Discrete Fourier magnitudes, kernel frequency responses and leakage metrics.

The transform is the unnormalized forward DFT in standard ordering (index 0 is
DC, indices above P/2 are negative frequencies). Power-of-two lengths go
through an iterative radix-2 decimation-in-time FFT; other lengths fall back
to a direct O(n^2) matrix DFT.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from .tensor import SizeError

SIDELOBE_FLOOR_DB = float("-inf")


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    # reduce k*n mod n before scaling to keep the phase argument small
    return np.exp(-2j * np.pi * ((k[:, None] * k[None, :]) % n) / n)


def fft(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unnormalized forward DFT along ``axis``."""
    a = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, -1)
    n = a.shape[-1]
    if n == 0:
        return np.moveaxis(a.copy(), -1, axis)
    if not _is_pow2(n):
        out = a @ _dft_matrix(n).T
        return np.moveaxis(out, -1, axis)

    out = a[..., _bit_reverse(n)].copy()
    lead = out.shape[:-1]
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / m)
        blocks = out.reshape(lead + (n // m, m))
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * tw
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        m *= 2
    return np.moveaxis(out, -1, axis)


def fft2(x: np.ndarray) -> np.ndarray:
    """2-D DFT over the last two axes."""
    return fft(fft(x, axis=-1), axis=-2)


@dataclass
class Spectrum2D:
    mag: np.ndarray  # [P, P] (or [..., P, P] for batches), standard DFT order

    @property
    def size(self) -> int:
        return self.mag.shape[-1]


def dft2_mag(x: np.ndarray) -> Spectrum2D:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise SizeError(f"dft2_mag expects at least 2 dims, got {x.shape}")
    return Spectrum2D(np.abs(fft2(x)))


def flatten_spectrum(s: Spectrum2D) -> np.ndarray:
    p = s.mag.shape[-1]
    return s.mag.reshape(s.mag.shape[:-2] + (s.mag.shape[-2] * p,))


def unflatten_spectrum(v: np.ndarray, p: int | None = None) -> Spectrum2D:
    n = v.shape[-1]
    if p is None:
        p = int(round(np.sqrt(n)))
    if p * p != n:
        raise SizeError(f"length {n} is not a square spectrum")
    return Spectrum2D(v.reshape(v.shape[:-1] + (p, p)))


def center_shift(mag: np.ndarray) -> np.ndarray:
    """Move DC to the middle, for display only."""
    p0, p1 = mag.shape[-2:]
    return np.roll(mag, (p0 // 2, p1 // 2), axis=(-2, -1))


def kernel_frequency_response(kernel: np.ndarray, p: int = 64) -> Spectrum2D:
    """Magnitude response of a 2-D kernel, zero-embedded top-left in a p x p grid."""
    kernel = np.asarray(kernel, dtype=np.float64)
    kr, kc = kernel.shape[-2:]
    if p < max(kr, kc):
        raise SizeError(f"analysis grid {p} smaller than kernel {kr}x{kc}")
    grid = np.zeros(kernel.shape[:-2] + (p, p))
    grid[..., :kr, :kc] = kernel
    return dft2_mag(grid)


@dataclass
class LeakageReport:
    """Main-lobe / sidelobe summary of a magnitude spectrum.

    This metric is a construction of this library (there is no standard
    numeric definition of "leakage" for 2-D kernels). The main lobe is seeded
    by the 4-connected region on the periodic frequency grid around the global
    peak whose magnitude stays within ``threshold_db`` of the peak, then grown
    strictly downhill so that it includes its skirt down to the first nulls.
    """

    peak_mainlobe: float
    peak_sidelobe: float
    sidelobe_db: float
    out_of_band_energy_fraction: float
    threshold_db: float
    mainlobe_bins: int

    def as_dict(self) -> dict:
        return {
            "metric": "leakconv.leakage_metrics (library-defined)",
            "peak_mainlobe": self.peak_mainlobe,
            "peak_sidelobe": self.peak_sidelobe,
            "sidelobe_db": self.sidelobe_db,
            "out_of_band_energy_fraction": self.out_of_band_energy_fraction,
            "threshold_db": self.threshold_db,
            "mainlobe_bins": self.mainlobe_bins,
        }


def mainlobe_mask(mag: np.ndarray, threshold_db: float = -6.0) -> np.ndarray:
    """Boolean mask of the main lobe (flood fill on the torus, 4-connectivity).

    A neighbour joins the lobe if it is above the threshold level, or if it is
    strictly lower than the cell it is reached from.
    """
    if threshold_db >= 0:
        raise ValueError("passband threshold must be below 0 dB")
    mag = np.asarray(mag, dtype=np.float64)
    peak = float(mag.max())
    if not peak > 0:
        raise ValueError("leakage metrics are undefined for an all-zero spectrum")
    level = peak * 10.0 ** (threshold_db / 20.0)
    above = mag >= level
    rows, cols = mag.shape
    start = np.unravel_index(int(np.argmax(mag)), mag.shape)
    mask = np.zeros_like(above)
    mask[start] = True
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        for nr, nc in ((r - 1) % rows, c), ((r + 1) % rows, c), (r, (c - 1) % cols), (r, (c + 1) % cols):
            if not mask[nr, nc] and (above[nr, nc] or mag[nr, nc] < mag[r, c]):
                mask[nr, nc] = True
                queue.append((nr, nc))
    return mask


def leakage_metrics(s: Spectrum2D | np.ndarray, threshold_db: float = -6.0) -> LeakageReport:
    mag = s.mag if isinstance(s, Spectrum2D) else np.asarray(s, dtype=np.float64)
    if mag.ndim == 1:
        mag = mag[:, None]
    mask = mainlobe_mask(mag, threshold_db)
    peak = float(mag[mask].max())
    outside = mag[~mask]
    energy = mag ** 2
    total = float(energy.sum())
    oob = float(energy[~mask].sum()) / total
    if outside.size == 0:
        side, side_db = 0.0, SIDELOBE_FLOOR_DB
    else:
        side = float(outside.max())
        side_db = float(20.0 * np.log10(side / peak)) if side > 0 else SIDELOBE_FLOOR_DB
    return LeakageReport(peak, side, side_db, min(max(oob, 0.0), 1.0), threshold_db, int(mask.sum()))


def peak_sidelobe_db_1d(taps: np.ndarray, n_fft: int = 1024) -> float:
    """Peak sidelobe level (dB re. main-lobe peak) of a 1-D window.

    The main lobe extends from DC to the first local minimum of the magnitude;
    the sidelobe peak is the largest local maximum beyond it.
    """
    padded = np.zeros(n_fft)
    padded[: len(taps)] = taps
    mag = np.abs(fft(padded))[: n_fft // 2 + 1]
    i = 1
    while i < len(mag) - 1 and not (mag[i] <= mag[i - 1] and mag[i] <= mag[i + 1]):
        i += 1
    rest = mag[i:]
    if rest.size < 3:
        return SIDELOBE_FLOOR_DB
    local_max = (rest[1:-1] >= rest[:-2]) & (rest[1:-1] >= rest[2:])
    if not local_max.any():
        return SIDELOBE_FLOOR_DB
    side = rest[1:-1][local_max].max()
    return float(20.0 * np.log10(side / mag[0]))


def mean_out_of_band_fraction(kernels: np.ndarray, p: int = 64, threshold_db: float = -6.0) -> float:
    """Average out-of-band energy fraction over the (c, m) slices of a [k, k, C, M] kernel."""
    vals = []
    for c in range(kernels.shape[2]):
        for m in range(kernels.shape[3]):
            sl = kernels[:, :, c, m]
            if not np.any(sl):
                warnings.warn(f"skipping all-zero kernel slice (c={c}, m={m})")
                continue
            vals.append(leakage_metrics(kernel_frequency_response(sl, p), threshold_db).out_of_band_energy_fraction)
    return float(np.mean(vals))
