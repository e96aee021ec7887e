"""Synthetic sine-superposition images, IDX / CIFAR-10 readers, resampling and augmentation."""

from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .spectral import dft2_mag, flatten_spectrum
from .tensor import Rng, ShapeError, load_tensor, rng_uniform, save_tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class SineImageSpec:
    size: int = 32
    num_waves: int = 3
    max_frequency: float = 0.5  # cycles/pixel, the Nyquist limit

    def __post_init__(self):
        if self.size < 1 or self.num_waves < 1:
            raise ValueError("size and num_waves must be >= 1")
        if not 0 < self.max_frequency <= 0.5:
            raise ValueError("max_frequency must lie in (0, 0.5]")


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N, C, H, W]
    targets: np.ndarray  # [N] int labels or [N, n] regression vectors
    split: str = "train"
    num_classes: int | None = None

    def __post_init__(self):
        if len(self.images) != len(self.targets):
            raise ShapeError(f"{len(self.images)} images vs {len(self.targets)} targets")
        if self.images.ndim != 4:
            raise ShapeError(f"images must be [N,C,H,W], got {self.images.shape}")
        if self.num_classes is not None and len(self.targets):
            if self.targets.min() < 0 or self.targets.max() >= self.num_classes:
                raise FormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.images)

    def subset(self, n: int, rng: Rng | None = None) -> "LabeledDataset":
        """First ``n`` samples, or a seeded random ``n``-subset when ``rng`` is given."""
        idx = np.arange(min(n, len(self))) if rng is None else np.sort(rng.permutation(len(self))[:n])
        return LabeledDataset(self.images[idx], self.targets[idx], self.split, self.num_classes)

    def save(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        files = save_tensor(directory / f"{self.split}_images.bin", self.images)
        files += save_tensor(directory / f"{self.split}_targets.bin", self.targets.astype(np.float64))
        meta = directory / f"{self.split}_meta.json"
        meta.write_text(json.dumps({"split": self.split, "num_classes": self.num_classes,
                                    "n": len(self), "image_shape": list(self.images.shape[1:])}))
        return files + [meta]

    @classmethod
    def load(cls, directory: str | Path, split: str) -> "LabeledDataset":
        directory = Path(directory)
        meta = json.loads((directory / f"{split}_meta.json").read_text())
        images = load_tensor(directory / f"{split}_images.bin")
        targets = load_tensor(directory / f"{split}_targets.bin")
        if meta["num_classes"] is not None:
            targets = targets.astype(np.int64)
        return cls(images, targets, split, meta["num_classes"])


# -- synthetic sines


def sine_image(size: int, waves) -> np.ndarray:
    """Sum of sin(2 pi (x cos t + y sin t) w + phi) on the pixel grid x, y = 0..size-1.

    ``x`` indexes the first (row) axis, ``y`` the second.
    """
    x, y = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    img = np.zeros((size, size))
    for omega, theta, phi in waves:
        xr = x * math.cos(theta) + y * math.sin(theta)
        img += np.sin(2.0 * math.pi * xr * omega + phi)
    return img


def gen_sine_image(rng: Rng, spec: SineImageSpec = SineImageSpec()):
    """Random image of ``spec.num_waves`` superposed plane waves.

    Returns ``(image [1, P, P], [(omega, theta, phi), ...])`` with
    omega ~ U[0, max_frequency), theta ~ U[0, pi), phi ~ U[0, 2 pi).
    """
    waves = []
    for _ in range(spec.num_waves):
        omega = float(rng_uniform(rng, 0.0, spec.max_frequency))
        theta = float(rng_uniform(rng, 0.0, math.pi))
        phi = float(rng_uniform(rng, 0.0, 2.0 * math.pi))
        waves.append((omega, theta, phi))
    return sine_image(spec.size, waves)[None], waves


def _sine_split(rng: Rng, n: int, spec: SineImageSpec, split: str, offset: int) -> LabeledDataset:
    images = np.empty((n, 1, spec.size, spec.size))
    for i in range(n):
        images[i], _ = gen_sine_image(rng.substream(offset + i), spec)
    targets = flatten_spectrum(dft2_mag(images[:, 0]))
    return LabeledDataset(images, targets, split)


def gen_fft_dataset(rng: Rng, n_train: int = 10000, n_val: int = 1000, spec: SineImageSpec = SineImageSpec()):
    """Training and validation sets whose targets are flattened 2-D DFT magnitudes.

    Sample ``i`` of the training split uses RNG substream ``i`` and sample ``j``
    of the validation split substream ``n_train + j``, so generation is
    reproducible sample by sample.
    """
    if n_train < 1 or n_val < 1:
        raise ValueError("dataset sizes must be >= 1")
    return (_sine_split(rng, n_train, spec, "train", 0),
            _sine_split(rng, n_val, spec, "validation", n_train))


# -- IDX (MNIST family)


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes, offset 0)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header, need {header} bytes, have {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + math.prod(dims)
    if len(raw) < need:
        raise FormatError(f"{path}: truncated data at offset {len(raw)}, expected {need} bytes for dims {dims}")
    return np.frombuffer(raw, dtype=np.uint8, count=math.prod(dims), offset=header).reshape(dims)


def write_idx(path: str | Path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.uint8)
    magic = 0x00000800 | data.ndim
    header = struct.pack(f">I{data.ndim}I", magic, *data.shape)
    payload = header + data.tobytes(order="C")
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> LabeledDataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch: {images.shape[0]} images (offset 4 of {images_path}) "
                          f"vs {labels.shape[0]} labels (offset 4 of {labels_path})")
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise FormatError(f"{labels_path}: label {labels[bad]} at byte offset {8 + bad} outside [0, {num_classes})")
    x = images.astype(np.float64)[:, None] / 255.0
    return LabeledDataset(x, labels.astype(np.int64), split, num_classes)


# -- CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes (R, G, B planes)

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


def load_cifar10_batch(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record "
                          f"(trailing record starts at offset {len(raw) - len(raw) % CIFAR_RECORD})")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{path}: label {labels[bad]} at offset {bad * CIFAR_RECORD} outside [0, 10)")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def find_cifar10(directory: str | Path | None) -> Path | None:
    """Locate the extracted ``cifar-10-batches-bin`` directory under ``directory``."""
    if directory is None:
        return None
    directory = Path(directory)
    for cand in (directory, directory / "cifar-10-batches-bin"):
        if all((cand / f).exists() for f in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES):
            return cand
    return None


def load_cifar10(directory: str | Path, split: str = "train") -> LabeledDataset:
    root = find_cifar10(directory)
    if root is None:
        raise FileNotFoundError(f"no CIFAR-10 binary batches found under {directory}")
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    parts = [load_cifar10_batch(root / f) for f in files]
    return LabeledDataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                          split, 10)


# -- resampling / augmentation


def bilinear_subsample(x: np.ndarray, factor: int = 2) -> np.ndarray:
    """Downsample ``[C, H, W]`` (or ``[N, C, H, W]``) by ``factor`` with bilinear weights.

    Output pixel ``p`` samples input coordinate ``(p + 0.5) * factor - 0.5``
    (pixel centres aligned), clamped at the borders.
    """
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"bilinear_subsample needs even extents, got {h}x{w}")

    def axis_weights(n):
        pos = (np.arange(n // factor) + 0.5) * factor - 0.5
        pos = np.clip(pos, 0, n - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis_weights(h)
    c0, c1, fc = axis_weights(w)
    rows = x[..., r0, :] * (1 - fr)[:, None] + x[..., r1, :] * fr[:, None]
    return rows[..., c0] * (1 - fc) + rows[..., c1] * fc


def shift_image(x: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Integer translation of ``[C, H, W]`` with zero fill (pad-and-crop)."""
    c, h, w = x.shape
    out = np.zeros_like(x)
    src_r = slice(max(0, -dr), min(h, h - dr))
    dst_r = slice(max(0, dr), min(h, h + dr))
    src_c = slice(max(0, -dc), min(w, w - dc))
    dst_c = slice(max(0, dc), min(w, w + dc))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        out[:, dst_r, dst_c] = x[:, src_r, src_c]
    return out


def augment(rng: Rng, x: np.ndarray, max_shift: int = 4, flip: bool | None = None,
            shift: tuple[int, int] | None = None) -> np.ndarray:
    """Random horizontal flip (p = 0.5) and integer translation in [-max_shift, max_shift].

    ``flip`` / ``shift`` force the respective choice; the RNG is consumed in a
    fixed order (flip, row shift, column shift) either way.
    """
    draw_flip = rng.random() < 0.5
    draw_shift = (int(rng.integers(-max_shift, max_shift)), int(rng.integers(-max_shift, max_shift)))
    flip = draw_flip if flip is None else flip
    dr, dc = draw_shift if shift is None else shift
    out = x[:, :, ::-1] if flip else x
    return shift_image(np.ascontiguousarray(out), dr, dc)
