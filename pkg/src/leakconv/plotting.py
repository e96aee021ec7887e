"""PNG figures rendered next to the CSV/JSON artifacts (matplotlib, headless)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import spectrum_db  # noqa: E402
from .spectral import center_shift, kernel_frequency_response  # noqa: E402


def plot_learning_curves(out_dir: Path, cfg, variants: dict, metric: str) -> list[Path]:
    """Seed-mean validation curve per variant with a +-1 std band."""
    from .harness import read_csv

    fig, ax = plt.subplots(figsize=(6, 4))
    for vname in variants:
        rows = read_csv(out_dir / vname / "aggregate.csv")
        epochs = np.array([int(r["epoch"]) for r in rows])
        mean = np.array([float(r["val_metric_mean"]) for r in rows])
        ax.plot(epochs, mean, label=vname)
        if rows and rows[0]["val_metric_std"]:
            std = np.array([float(r["val_metric_std"]) for r in rows])
            ax.fill_between(epochs, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel(metric)
    ax.set_title(cfg.name)
    ax.legend(fontsize="small")
    fig.tight_layout()
    path = out_dir / "learning_curves.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return [path]


def plot_kernel_spectra(path: Path, kernels: np.ndarray, grid: int = 64, max_kernels: int = 8) -> Path:
    """First ``max_kernels`` output channels (input channel 0): weights on top, log spectra below."""
    n = min(max_kernels, kernels.shape[3])
    fig, axes = plt.subplots(2, n, figsize=(1.6 * n, 3.4), squeeze=False)
    for m in range(n):
        k = kernels[:, :, 0, m]
        axes[0, m].imshow(k, cmap="gray")
        mag = kernel_frequency_response(k, max(grid, *k.shape)).mag
        axes[1, m].imshow(center_shift(spectrum_db(mag)), cmap="magma", vmin=-80, vmax=0)
        for ax in axes[:, m]:
            ax.set_axis_off()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
