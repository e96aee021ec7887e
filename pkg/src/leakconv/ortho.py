"""Doubly block-Toeplitz matrices of conv layers and their deviation from row orthogonality."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .conv import ConvLayer
from .tensor import Rng, SizeError

DENSE_BUDGET = 10**8


@dataclass
class DbtMatrix:
    matrix: np.ndarray  # [M*H'*W', C*H*W]
    input_shape: tuple[int, int, int]
    output_shape: tuple[int, int, int]
    layer_name: str = ""

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]


def build_dbt(layer: ConvLayer, input_shape, name: str = "", budget: int = DENSE_BUDGET) -> DbtMatrix:
    """Dense matrix ``K`` with ``conv2d_forward(x) == K @ x.ravel() + bias`` (bias per output channel).

    Row ``(m, p, q)`` holds the effective (windowed) kernel of output channel
    ``m`` placed at the input positions it reads; taps that fall into the zero
    padding have no column and are dropped.
    """
    c, h, w = (int(v) for v in input_shape)
    if c != layer.in_channels:
        raise SizeError(f"layer {name or '?'} expects {layer.in_channels} input channels, got {c}")
    g = layer.geometry
    oh, ow = g.out_shape(h, w)
    m = layer.out_channels
    n_rows, n_cols = m * oh * ow, c * h * w
    if n_rows * n_cols > budget:
        raise SizeError(f"DBT for layer {name or '?'} would have {n_rows}x{n_cols} = {n_rows * n_cols} entries "
                        f"(budget {budget}); use a smaller input shape or layer")
    k = layer.effective_kernel()
    mat = np.zeros((m, oh, ow, c, h, w))
    p = np.arange(oh)
    q = np.arange(ow)
    for i in range(g.k_rows):
        rows_in = p * g.stride + i - g.pad
        pv = (rows_in >= 0) & (rows_in < h)
        for j in range(g.k_cols):
            cols_in = q * g.stride + j - g.pad
            qv = (cols_in >= 0) & (cols_in < w)
            pp, qq = np.meshgrid(p[pv], q[qv], indexing="ij")
            rr, cc = np.meshgrid(rows_in[pv], cols_in[qv], indexing="ij")
            # mat[m, p, q, c, r, s] = k[i, j, c, m]
            mat[:, pp, qq, :, rr, cc] = k[i, j].T[None, None]
    return DbtMatrix(mat.reshape(n_rows, n_cols), (c, h, w), (m, oh, ow), name)


def ortho_deviation(dbt: DbtMatrix | np.ndarray) -> float:
    """Mean |<k_i, k_j>| over ordered pairs i != j of unit-normalized DBT rows.

    All-zero rows are dropped (with a warning) before normalizing.
    """
    mat = dbt.matrix if isinstance(dbt, DbtMatrix) else np.asarray(dbt, dtype=np.float64)
    keep = np.any(mat != 0, axis=1)
    if not keep.any():
        raise ValueError("orthogonality deviation is undefined: every DBT row is zero")
    if not keep.all():
        warnings.warn(f"excluding {int((~keep).sum())} all-zero DBT rows")
    rows = mat[keep]
    n = rows.shape[0]
    if n < 2:
        raise ValueError("need at least two non-zero rows")
    gram = rows @ rows.T
    sq = np.diag(gram).copy()
    # |<a,b>| / sqrt(|a|^2 |b|^2) is exactly 1 for identical rows, unlike a dot of pre-normalized rows
    cos = np.abs(gram) / np.sqrt(np.outer(sq, sq))
    np.fill_diagonal(cos, 0.0)
    return float(cos.sum() / (n * (n - 1)))


@dataclass
class LayerOrtho:
    name: str
    D: float
    chance_D: float
    n_rows: int


@dataclass
class OrthoReport:
    layers: list[LayerOrtho] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"layers": [{"name": l.name, "D": l.D, "chance_D": l.chance_D, "n_rows": l.n_rows}
                           for l in self.layers]}


def model_deviations(model, input_shape=None, budget: int = DENSE_BUDGET) -> list[tuple[str, float, int]]:
    shapes = model.conv_input_shapes(input_shape)
    out = []
    for i, (layer, shape) in enumerate(zip(model.convs, shapes)):
        dbt = build_dbt(layer, shape, f"conv{i}", budget)
        out.append((f"conv{i}", ortho_deviation(dbt), dbt.rows))
    return out


def ortho_report(model, input_shape=None, rng: Rng | None = None, budget: int = DENSE_BUDGET) -> OrthoReport:
    """Per-layer D of ``model`` and of a freshly initialized twin (``chance_D``) drawn from ``rng``."""
    from .nn import model_init

    fresh = model_init(model.spec, rng if rng is not None else Rng(0))
    trained = model_deviations(model, input_shape, budget)
    chance = model_deviations(fresh, input_shape, budget)
    return OrthoReport([LayerOrtho(name, d, cd, n) for (name, d, n), (_, cd, _) in zip(trained, chance)])
