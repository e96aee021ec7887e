"""2-D convolution (correlation orientation) with an optional kernel window.

Weights are stored as ``[k_rows, k_cols, C, M]``. Activations are ``[C, H, W]``
or batched ``[B, C, H, W]``. The window is multiplied onto the stored weights on
every forward pass, so the optimizer always sees the untapered parameters and
their gradients are attenuated by the window coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError
from .windows import Window, apply_window


@dataclass(frozen=True)
class ConvGeometry:
    k_rows: int
    k_cols: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.k_rows < 1 or self.k_cols < 1:
            raise ShapeError("kernel extents must be >= 1")
        if self.stride < 1 or self.pad < 0:
            raise ShapeError(f"invalid stride={self.stride} / pad={self.pad}")

    def out_shape(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.pad - self.k_rows) // self.stride + 1
        ow = (w + 2 * self.pad - self.k_cols) // self.stride + 1
        if h + 2 * self.pad < self.k_rows or w + 2 * self.pad < self.k_cols or oh < 1 or ow < 1:
            raise ShapeError(f"kernel {self.k_rows}x{self.k_cols} (pad {self.pad}) does not fit a {h}x{w} input")
        return oh, ow


@dataclass
class ConvLayer:
    weights: np.ndarray  # [k_rows, k_cols, C, M]
    bias: np.ndarray  # [M]
    geometry: ConvGeometry
    window: Window | None = None

    def __post_init__(self):
        k_rows, k_cols, _, m = self.weights.shape
        if (k_rows, k_cols) != (self.geometry.k_rows, self.geometry.k_cols):
            raise ShapeError(f"weights {self.weights.shape} disagree with geometry {self.geometry}")
        if self.bias.shape != (m,):
            raise ShapeError(f"bias shape {self.bias.shape}, expected ({m},)")
        if self.window is not None and self.window.spec.shape != (k_rows, k_cols):
            raise ShapeError(f"window {self.window.spec.shape} does not match kernel {k_rows}x{k_cols}")

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]

    def effective_kernel(self) -> np.ndarray:
        if self.window is None:
            return self.weights
        return apply_window(self.weights, self.window)


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [C,H,W] or [B,C,H,W], got shape {x.shape}")


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _patches(xp: np.ndarray, g: ConvGeometry, oh: int, ow: int) -> np.ndarray:
    """View of shape [B, C, oh, ow, k_rows, k_cols]."""
    win = sliding_window_view(xp, (g.k_rows, g.k_cols), axis=(2, 3))
    s = g.stride
    return win[:, :, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    xb, single = _batched(x)
    if xb.shape[1] != layer.in_channels:
        raise ShapeError(f"input has {xb.shape[1]} channels, layer expects {layer.in_channels}")
    g = layer.geometry
    oh, ow = g.out_shape(xb.shape[2], xb.shape[3])
    cols = _patches(_pad(xb, g.pad), g, oh, ow)
    k = layer.effective_kernel()
    # cols [B,C,oh,ow,i,j] . k [i,j,C,M] -> [B,oh,ow,M]
    y = np.tensordot(cols, k, axes=([1, 4, 5], [2, 0, 1]))
    y = y.transpose(0, 3, 1, 2) + layer.bias[None, :, None, None]
    y = np.ascontiguousarray(y)
    return y[0] if single else y


def conv2d_backward(x: np.ndarray, layer: ConvLayer, dy: np.ndarray, need_dx: bool = True,
                    need_dw: bool = True):
    """Return ``(dx, dW, db)`` for the stored (untapered) weights.

    ``dW`` is the gradient w.r.t. the effective kernel multiplied by the window.
    ``dx`` (``dW``, ``db``) is ``None`` when ``need_dx`` (``need_dw``) is false.
    """
    xb, single = _batched(x)
    dyb, _ = _batched(dy)
    g = layer.geometry
    b, c, h, w = xb.shape
    oh, ow = g.out_shape(h, w)
    if dyb.shape != (b, layer.out_channels, oh, ow):
        raise ShapeError(f"dy shape {dy.shape} does not match forward output {(b, layer.out_channels, oh, ow)}")

    xp = _pad(xb, g.pad)
    cols = _patches(xp, g, oh, ow)
    dw = db = None
    if need_dw:
        # dK[i,j,C,M] = sum_{b,p,q} cols[b,C,p,q,i,j] dy[b,M,p,q]
        dk = np.tensordot(cols, dyb, axes=([0, 2, 3], [0, 2, 3]))  # [C,i,j,M]
        dk = dk.transpose(1, 2, 0, 3)
        dw = dk if layer.window is None else apply_window(dk, layer.window)
        db = dyb.sum(axis=(0, 2, 3))

    dx = None
    if need_dx:
        k = layer.effective_kernel()
        # dcols[b,p,q,i,j,C] = sum_M dy[b,M,p,q] k[i,j,C,M]
        dcols = np.tensordot(dyb.transpose(0, 2, 3, 1), k, axes=([3], [3]))
        dxp = np.zeros_like(xp)
        s = g.stride
        for i in range(g.k_rows):
            for j in range(g.k_cols):
                dxp[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s] += \
                    dcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
        dx = dxp[:, :, g.pad : g.pad + h, g.pad : g.pad + w]
        dx = np.ascontiguousarray(dx)
        if single:
            dx = dx[0]
    return dx, dw, db


def max_pool2x2(x: np.ndarray):
    """2x2 / stride-2 max pool. Returns ``(y, argmax)`` with argmax in 0..3 (row-major in window).

    Ties go to the first position in scan order.
    """
    xb, single = _batched(x)
    b, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2 needs even extents, got {h}x{w}")
    blocks = xb.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h // 2, w // 2, 4)
    arg = np.argmax(blocks, axis=-1)  # argmax returns the first maximum
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    if single:
        return y[0], arg[0]
    return y, arg


def max_pool2x2_backward(dy: np.ndarray, arg: np.ndarray) -> np.ndarray:
    dyb, single = _batched(dy)
    argb = arg[None] if single else arg
    b, c, h2, w2 = dyb.shape
    blocks = np.zeros((b, c, h2, w2, 4))
    np.put_along_axis(blocks, argb[..., None], dyb[..., None], axis=-1)
    dx = blocks.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
    return dx[0] if single else dx
