"""Layer stack, losses, optimizers and the training loop.

Two model families are supported:

* ``fft_regression``: one same-padded conv layer with ``H*W`` output channels,
  ReLU, and global average pooling. Each output channel predicts one bin of
  the input's flattened 2-D DFT magnitude.
* ``classification``: a strided (or pooled) first conv layer followed by
  ``M - 1`` conv blocks, ReLU after every conv, global average pooling and a
  fully connected head.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .conv import ConvGeometry, ConvLayer, conv2d_backward, conv2d_forward, max_pool2x2, max_pool2x2_backward
from .tensor import Rng, ShapeError, load_tensor, rng_uniform, save_tensor
from .windows import WindowSpec, make_window

log = logging.getLogger(__name__)

TASKS = ("fft_regression", "classification")
DOWNSAMPLING = ("strided_conv", "max_pool", "none")


class NumericError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class ConvSpec:
    k: int
    out_channels: int
    window: str | None = None  # None, "rectangular" or "hamming"
    stride: int = 1

    def window_spec(self) -> WindowSpec | None:
        return None if self.window is None else WindowSpec(self.window, self.k, self.k)


@dataclass
class ModelSpec:
    task: str
    input_shape: tuple[int, int, int]
    first_layer: ConvSpec
    blocks: list[ConvSpec] = field(default_factory=list)
    downsampling: str = "strided_conv"
    num_outputs: int = 10

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if isinstance(self.first_layer, dict):
            self.first_layer = ConvSpec(**self.first_layer)
        self.blocks = [ConvSpec(**b) if isinstance(b, dict) else b for b in self.blocks]
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.downsampling not in DOWNSAMPLING:
            raise ValueError(f"unknown downsampling {self.downsampling!r}")
        for conv in [self.first_layer, *self.blocks]:
            if conv.window is not None:
                conv.window_spec()  # validates the family name
        c, h, w = self.input_shape
        if self.task == "fft_regression":
            if self.blocks or self.first_layer.out_channels != h * w or self.num_outputs != h * w:
                raise ValueError("fft_regression is exactly one conv layer with H*W output channels")
            if self.first_layer.stride != 1 or self.downsampling != "none":
                raise ValueError("fft_regression uses stride 1 and no downsampling")

    def conv_specs(self) -> list[ConvSpec]:
        return [self.first_layer, *self.blocks]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def fft_regression_spec(size: int, k: int, window: str | None = None) -> ModelSpec:
    n = size * size
    return ModelSpec(
        task="fft_regression",
        input_shape=(1, size, size),
        first_layer=ConvSpec(k=k, out_channels=n, window=window, stride=1),
        downsampling="none",
        num_outputs=n,
    )


def classifier_spec(input_shape, depth: int, h1: int = 32, h2: int = 128, k_first: int = 7,
                    k_block: int = 3, window: str = "none", downsampling: str = "strided_conv",
                    num_classes: int = 10, window_family: str = "hamming") -> ModelSpec:
    """Simple classifier of ``depth`` conv layers.

    ``window`` is the placement: ``none``, ``first`` (first layer only) or ``all``.
    """
    if window not in ("none", "first", "all"):
        raise ValueError(f"window placement must be none|first|all, got {window!r}")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    first_win = None if window == "none" else window_family
    block_win = window_family if window == "all" else None
    first = ConvSpec(k=k_first, out_channels=h1, window=first_win,
                     stride=2 if downsampling == "strided_conv" else 1)
    blocks = [ConvSpec(k=k_block, out_channels=h2, window=block_win) for _ in range(depth - 1)]
    return ModelSpec("classification", tuple(input_shape), first, blocks, downsampling, num_classes)


def param_count(spec: ModelSpec) -> int:
    total, c = 0, spec.input_shape[0]
    for conv in spec.conv_specs():
        total += conv.k * conv.k * c * conv.out_channels + conv.out_channels
        c = conv.out_channels
    if spec.task == "classification":
        total += c * spec.num_outputs + spec.num_outputs
    return total


class Model:
    """Parameters plus the forward cache of one batch."""

    def __init__(self, spec: ModelSpec, convs: list[ConvLayer], fc_w: np.ndarray | None, fc_b: np.ndarray | None):
        self.spec = spec
        self.convs = convs
        self.fc_w = fc_w
        self.fc_b = fc_b
        self._cache: dict | None = None

    # -- parameters

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.convs):
            params[f"conv{i}.weight"] = layer.weights
            params[f"conv{i}.bias"] = layer.bias
        if self.fc_w is not None:
            params["fc.weight"] = self.fc_w
            params["fc.bias"] = self.fc_b
        return params

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.convs):
            layer.weights = params[f"conv{i}.weight"]
            layer.bias = params[f"conv{i}.bias"]
        if self.fc_w is not None:
            self.fc_w = params["fc.weight"]
            self.fc_b = params["fc.bias"]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def copy(self) -> "Model":
        m = Model(self.spec, [ConvLayer(l.weights.copy(), l.bias.copy(), l.geometry, l.window) for l in self.convs],
                  None if self.fc_w is None else self.fc_w.copy(),
                  None if self.fc_b is None else self.fc_b.copy())
        return m

    # -- geometry

    def conv_input_shapes(self, input_shape=None) -> list[tuple[int, int, int]]:
        """Input shape ``(C, H, W)`` seen by each conv layer, in depth order."""
        c, h, w = input_shape or self.spec.input_shape
        shapes = []
        for i, layer in enumerate(self.convs):
            shapes.append((c, h, w))
            h, w = layer.geometry.out_shape(h, w)
            c = layer.out_channels
            if i == 0 and self.spec.downsampling == "max_pool":
                h, w = h // 2, w // 2
        return shapes

    # -- passes

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != self.spec.input_shape:
            raise ShapeError(f"batch shape {x.shape[1:]} does not match model input {self.spec.input_shape}")
        cache = {"conv_in": [], "relu_mask": [], "pool_arg": None}
        a = x
        for i, layer in enumerate(self.convs):
            cache["conv_in"].append(a)
            z = conv2d_forward(a, layer)
            mask = z > 0
            cache["relu_mask"].append(mask)
            a = z * mask
            if i == 0 and self.spec.downsampling == "max_pool":
                a, cache["pool_arg"] = max_pool2x2(a)
        cache["gap_shape"] = a.shape
        pooled = a.mean(axis=(2, 3))
        if self.spec.task == "classification":
            cache["fc_in"] = pooled
            out = pooled @ self.fc_w + self.fc_b
        else:
            out = pooled
        self._cache = cache
        return out

    def backward(self, dout: np.ndarray, need_input_grad: bool = False, need_param_grads: bool = True):
        """Backpropagate ``dout`` (gradient w.r.t. the last forward output).

        Returns ``(grads, dx)``; ``grads`` maps parameter names to gradients
        (empty when ``need_param_grads`` is false) and ``dx`` is the input
        gradient or ``None``.
        """
        cache = self._cache
        if cache is None:
            raise RuntimeError("backward called before forward")
        grads: dict[str, np.ndarray] = {}
        if self.spec.task == "classification":
            if need_param_grads:
                grads["fc.weight"] = cache["fc_in"].T @ dout
                grads["fc.bias"] = dout.sum(axis=0)
            dpooled = dout @ self.fc_w.T
        else:
            dpooled = dout
        b, c, h, w = cache["gap_shape"]
        da = np.broadcast_to((dpooled / (h * w))[:, :, None, None], (b, c, h, w))
        dx = None
        for i in reversed(range(len(self.convs))):
            if i == 0 and self.spec.downsampling == "max_pool":
                da = max_pool2x2_backward(da, cache["pool_arg"])
            dz = da * cache["relu_mask"][i]
            want_dx = i > 0 or need_input_grad
            if need_param_grads:
                dprev, dw, db = conv2d_backward(cache["conv_in"][i], self.convs[i], dz, need_dx=want_dx)
                grads[f"conv{i}.weight"] = dw
                grads[f"conv{i}.bias"] = db
            else:
                dprev = _conv_input_grad(cache["conv_in"][i], self.convs[i], dz) if want_dx else None
            if i > 0:
                da = dprev
            else:
                dx = dprev
        ordered = {name: grads[name] for name in self.parameters() if name in grads}
        return ordered, dx

    def logits_and_input_jacobian(self, x: np.ndarray):
        """Outputs ``f(x)`` and the Jacobian ``d f_k / d x`` of shape ``[n_out, C, H, W]``."""
        n = self.spec.num_outputs
        batch = np.broadcast_to(x, (n,) + x.shape).copy()
        out = self.forward(batch)
        _, jac = self.backward(np.eye(n), need_input_grad=True, need_param_grads=False)
        return out[0], jac

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        outs = [self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)


def _conv_input_grad(x, layer, dy):
    dx, _, _ = conv2d_backward(x, layer, dy, need_dx=True, need_dw=False)
    return dx


def model_init(spec: ModelSpec, rng: Rng) -> Model:
    """Uniform fan-in init: weights in ``[-1/sqrt(fan_in), 1/sqrt(fan_in))``, biases zero."""
    convs = []
    c = spec.input_shape[0]
    for i, conv in enumerate(spec.conv_specs()):
        bound = 1.0 / math.sqrt(conv.k * conv.k * c)
        w = rng_uniform(rng, -bound, bound, (conv.k, conv.k, c, conv.out_channels))
        geom = ConvGeometry(conv.k, conv.k, conv.stride, conv.k // 2)
        ws = conv.window_spec()
        convs.append(ConvLayer(w, np.zeros(conv.out_channels), geom, None if ws is None else make_window(ws)))
        c = conv.out_channels
    fc_w = fc_b = None
    if spec.task == "classification":
        bound = 1.0 / math.sqrt(c)
        fc_w = rng_uniform(rng, -bound, bound, (c, spec.num_outputs))
        fc_b = np.zeros(spec.num_outputs)
    model = Model(spec, convs, fc_w, fc_b)
    model.conv_input_shapes()  # raises early on an impossible geometry
    return model


# -- losses


def loss_mse(pred: np.ndarray, target: np.ndarray):
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def loss_softmax_ce(logits: np.ndarray, labels):
    labels = np.asarray(labels, dtype=np.int64)
    b, n = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
        raise ValueError(f"labels must lie in [0, {n})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    loss = -float(np.mean(logp[np.arange(b), labels]))
    d = np.exp(logp)
    d[np.arange(b), labels] -= 1.0
    return loss, d / b


def softmax_ce_per_sample(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1))[:, None]
    return -logp[np.arange(len(labels)), labels]


# -- optimizers


def _decays(name: str) -> bool:
    return name.endswith(".weight")


@dataclass
class OptimizerState:
    kind: str = "sgd_momentum"
    lr: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    slots: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def scalars(self) -> dict:
        d = asdict(self)
        d.pop("slots")
        return d


def sgd(lr=0.01, momentum=0.9, weight_decay=0.0) -> OptimizerState:
    return OptimizerState("sgd_momentum", lr=lr, momentum=momentum, weight_decay=weight_decay)


def adam(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0) -> OptimizerState:
    return OptimizerState("adam", lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)


def optimizer_step(opt: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """Return updated parameters. L2 weight decay is added to the gradient of weights (not biases)."""
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericError(f"non-finite gradient in {bad} at step {opt.step_count}")
    if set(grads) != set(params):
        raise KeyError(f"gradients {sorted(grads)} do not match parameters {sorted(params)}")
    opt.step_count += 1
    t = opt.step_count
    out = {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        if opt.weight_decay and _decays(name):
            g = g + opt.weight_decay * w
        if opt.kind == "sgd_momentum":
            v = opt.slots.get(name)
            v = g.copy() if v is None else opt.momentum * v + g
            opt.slots[name] = v
            out[name] = w - opt.lr * v
        else:
            m, v = opt.slots.get(name, (np.zeros_like(w), np.zeros_like(w)))
            m = opt.beta1 * m + (1 - opt.beta1) * g
            v = opt.beta2 * v + (1 - opt.beta2) * g * g
            opt.slots[name] = (m, v)
            m_hat = m / (1 - opt.beta1 ** t)
            v_hat = v / (1 - opt.beta2 ** t)
            out[name] = w - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return out


# -- training


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    initial_lr: float = 0.01
    lr_decay_epochs: list[int] = field(default_factory=list)
    lr_decay_factor: float = 0.1
    seed: int = 0
    shuffle: bool = True
    augmentation: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def lr_at(self, epoch: int) -> float:
        """Learning rate in effect during 0-based ``epoch``."""
        n = sum(1 for e in self.lr_decay_epochs if e <= epoch)
        return self.initial_lr * self.lr_decay_factor ** n


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float
    lr: float


@dataclass
class TrainReport:
    metric_name: str
    records: list[EpochRecord]
    params: dict[str, np.ndarray] = field(repr=False)
    wall_clock: float = 0.0

    def curve(self, key: str = "val_metric") -> np.ndarray:
        return np.array([getattr(r, key) for r in self.records])

    @property
    def final(self) -> float:
        return self.records[-1].val_metric if self.records else float("nan")


def _loss_fn(task: str) -> Callable:
    return loss_mse if task == "fft_regression" else loss_softmax_ce


def evaluate(model: Model, images: np.ndarray, targets: np.ndarray, batch_size: int = 256) -> float:
    """Validation metric: MSE for regression, accuracy for classification."""
    out = model.predict(images, batch_size)
    if model.spec.task == "fft_regression":
        return loss_mse(out, targets)[0]
    return float(np.mean(np.argmax(out, axis=1) == targets))


def train(model: Model, train_set, cfg: TrainConfig, opt: OptimizerState, val_set=None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainReport:
    """Mini-batch training with a deterministic per-epoch shuffle.

    ``train_set`` / ``val_set`` are objects with ``images`` and ``targets``
    arrays (see :class:`leakconv.datasets.LabeledDataset`).
    """
    from .datasets import augment

    n = len(train_set.images)
    if n == 0:
        raise ValueError("empty training set")
    loss_fn = _loss_fn(model.spec.task)
    metric = "val_mse" if model.spec.task == "fft_regression" else "val_accuracy"
    rng = Rng(cfg.seed, (0xDA7A,))
    records = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = rng.substream(epoch).permutation(n) if cfg.shuffle else np.arange(n)
        aug_rng = rng.substream(epoch, 1)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = train_set.images[idx]
            if cfg.augmentation:
                xb = np.stack([augment(aug_rng, x) for x in xb])
            out = model.forward(xb)
            loss, dout = loss_fn(out, train_set.targets[idx])
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at epoch {epoch}, batch starting {start}")
            grads, _ = model.backward(dout)
            model.set_parameters(optimizer_step(opt, model.parameters(), grads))
            total += loss * len(idx)
            seen += len(idx)
        val = evaluate(model, val_set.images, val_set.targets) if val_set is not None else float("nan")
        rec = EpochRecord(epoch, total / seen, val, opt.lr)
        records.append(rec)
        log.info("epoch %d train_loss=%.6g %s=%.6g lr=%g", epoch, rec.train_loss, metric, val, opt.lr)
        if on_epoch is not None:
            on_epoch(rec)
    return TrainReport(metric, records, model.parameters(), time.perf_counter() - t0)


# -- checkpoints: manifest.json + one raw tensor per parameter


def save_checkpoint(directory: str | Path, model: Model, opt: OptimizerState | None = None, epoch: int = 0) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    entries = {}
    for name, p in model.parameters().items():
        fname = f"{name}.bin"
        files += save_tensor(directory / fname, p)
        entries[name] = fname
    manifest = {
        "spec": model.spec.to_dict(),
        "optimizer": opt.scalars() if opt is not None else None,
        "epoch": epoch,
        "parameters": entries,
    }
    mpath = directory / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2))
    return [mpath, *files]


def load_checkpoint(directory: str | Path) -> tuple[Model, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = ModelSpec.from_dict(manifest["spec"])
    model = model_init(spec, Rng(0))
    params = {name: load_tensor(directory / fname) for name, fname in manifest["parameters"].items()}
    current = model.parameters()
    if set(params) != set(current):
        raise ValueError(f"checkpoint parameters {sorted(params)} do not match spec {sorted(current)}")
    for name, p in params.items():
        if p.shape != current[name].shape:
            raise ShapeError(f"checkpoint {name} has shape {p.shape}, spec expects {current[name].shape}")
    model.set_parameters(params)
    return model, manifest
