"""DeepFool (white-box, L2) and grid-search spatial transformation (black-box) attacks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import softmax_ce_per_sample


class AttackStall(RuntimeError):
    """Every class-score gradient difference vanished; DeepFool cannot take a step."""


@dataclass
class AttackConfig:
    kind: str = "deepfool"
    max_iter: int = 100
    overshoot: float = 0.02
    max_translate_percent: float = 12.5
    max_rotate_degrees: float = 22.5
    grid_steps: int = 5

    def __post_init__(self):
        if self.kind not in ("deepfool", "spatial"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.max_iter < 1 or self.overshoot < 0 or self.grid_steps < 1:
            raise ValueError("need max_iter >= 1, overshoot >= 0, grid_steps >= 1")
        if self.max_translate_percent < 0 or self.max_rotate_degrees < 0:
            raise ValueError("attack budgets must be non-negative")


@dataclass
class AttackItem:
    label: int
    clean_pred: int
    final_pred: int
    success: bool
    norm: float = 0.0  # DeepFool: L2 norm of the applied perturbation
    iterations: int = 0
    transform: tuple[float, float, float] | None = None  # spatial: (tx %, ty %, degrees)
    loss: float = float("nan")  # spatial: loss under the chosen transform
    max_loss: float = float("nan")  # spatial: largest loss over the grid
    stalled: bool = False


# -- DeepFool


def deepfool(model, x: np.ndarray, config: AttackConfig = AttackConfig(), label: int | None = None):
    """Minimal-L2 DeepFool perturbation of one input.

    ``model`` must provide ``logits_and_input_jacobian(x) -> (f [n], J [n, *x.shape])``.
    The attack pushes the input away from ``label`` (the true class, or the
    model's clean prediction when ``label`` is None). At each step it moves to
    the closest linearized boundary; the accumulated step is scaled by
    ``1 + overshoot`` before each re-evaluation. No clipping to a pixel range.

    Returns ``(AttackItem, x_adv)``.
    """
    f, jac = model.logits_and_input_jacobian(x)
    clean_pred = int(np.argmax(f))
    if label is None:
        label = clean_pred
    if clean_pred != label:
        return AttackItem(label, clean_pred, clean_pred, True, 0.0, 0), x.copy()

    r_tot = np.zeros_like(x)
    x_adv = x
    pred = clean_pred
    it = 0
    while pred == label and it < config.max_iter:
        if it > 0:
            f, jac = model.logits_and_input_jacobian(x_adv)
        best, step = math.inf, None
        for k in range(len(f)):
            if k == label:
                continue
            w_k = jac[k] - jac[label]
            nrm = float(np.linalg.norm(w_k))
            if nrm == 0.0:
                continue
            dist = abs(f[k] - f[label]) / nrm
            if dist < best:
                best, step = dist, (abs(f[k] - f[label]) / (nrm * nrm)) * w_k
        if step is None:
            raise AttackStall(f"all gradient differences are zero at iteration {it}")
        r_tot = r_tot + step
        x_adv = x + (1.0 + config.overshoot) * r_tot
        it += 1
        pred = int(np.argmax(_scores(model, x_adv)))
    norm = float(np.linalg.norm((1.0 + config.overshoot) * r_tot))
    return AttackItem(label, clean_pred, pred, pred != label, norm, it), x_adv


def _scores(model, x):
    # forward-only when available, to skip the Jacobian
    if hasattr(model, "forward"):
        return model.forward(x[None])[0]
    return model.logits_and_input_jacobian(x)[0]


# -- spatial transformations


def affine_resample(x: np.ndarray, tx_percent: float = 0.0, ty_percent: float = 0.0,
                    angle_deg: float = 0.0) -> np.ndarray:
    """Rotate ``[C, H, W]`` about its centre and translate, bilinear sampling, zero fill.

    ``tx_percent`` shifts columns by that percentage of the width,
    ``ty_percent`` rows by that percentage of the height.
    """
    c, h, w = x.shape
    a = math.radians(angle_deg)
    cos_a, sin_a = math.cos(a), math.sin(a)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ty, tx = ty_percent / 100.0 * h, tx_percent / 100.0 * w
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: source = R^-1 (out - centre - t) + centre
    dy, dx = rr - cy - ty, cc - cx - tx
    sy = cos_a * dy - sin_a * dx + cy
    sx = sin_a * dy + cos_a * dx + cx

    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    out = np.zeros_like(x)
    for oy, wy in ((0, 1.0 - fy), (1, fy)):
        for ox, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + oy, x0 + ox
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = np.where(valid, x[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], 0.0)
            out = out + vals * (wy * wx)
    return out


def _axis_values(limit: float, steps: int) -> list[float]:
    vals = set(np.linspace(-limit, limit, steps).tolist()) if limit > 0 else set()
    vals.add(0.0)
    return sorted(vals, key=lambda v: (v != 0.0, v))


def spatial_grid(config: AttackConfig) -> list[tuple[float, float, float]]:
    """All (tx %, ty %, degrees) combinations; the identity comes first."""
    tr = _axis_values(config.max_translate_percent, config.grid_steps)
    rot = _axis_values(config.max_rotate_degrees, config.grid_steps)
    return [(tx, ty, r) for tx in tr for ty in tr for r in rot]


def spatial_attack(model, x: np.ndarray, label: int, config: AttackConfig):
    """Exhaustive grid search over translations and rotations.

    The chosen transform is the highest-loss one among those that cause a
    misclassification, or the highest-loss one overall if none does. Ties go
    to the earliest grid entry, so an untouched input stays untouched.
    """
    grid = spatial_grid(config)
    batch = np.stack([affine_resample(x, *t) for t in grid])
    logits = model.forward(batch)
    losses = softmax_ce_per_sample(logits, np.full(len(grid), label))
    preds = np.argmax(logits, axis=1)
    wrong = preds != label
    pool = np.flatnonzero(wrong) if wrong.any() else np.arange(len(grid))
    best = int(pool[np.argmax(losses[pool])])
    return AttackItem(label, int(preds[0]), int(preds[best]), bool(wrong[best]),
                      transform=grid[best], loss=float(losses[best]), max_loss=float(losses.max()))


# -- evaluation


@dataclass
class RobustnessResult:
    kind: str
    n: int
    clean_accuracy: float
    attacked_accuracy: float
    stalls: int
    norm_stats: dict
    config: dict
    items: list[AttackItem] = field(default_factory=list, repr=False)
    notes: str = ""

    def as_dict(self, with_items: bool = False) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "items"}
        if with_items:
            d["items"] = [asdict(i) for i in self.items]
        return d


def clean_predictions(model, images: np.ndarray) -> np.ndarray:
    return np.argmax(model.predict(images), axis=1)


def evaluate_robustness(model, dataset, config: AttackConfig, limit: int | None = None) -> RobustnessResult:
    """Attack every sample (or the first ``limit``) and compare clean vs attacked accuracy."""
    images, labels = dataset.images, np.asarray(dataset.targets)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    clean = clean_predictions(model, images)
    items, stalls = [], 0
    for x, y, cp in zip(images, labels, clean):
        y = int(y)
        if config.kind == "deepfool":
            try:
                item, _ = deepfool(model, x, config, label=y)
            except AttackStall:
                stalls += 1
                item = AttackItem(y, int(cp), int(cp), False, stalled=True)
        else:
            item = spatial_attack(model, x, y, config)
        items.append(item)
    attacked = np.array([it.final_pred for it in items])
    norms = np.array([it.norm for it in items if it.success and config.kind == "deepfool"])
    stats = {}
    if norms.size:
        stats = {"mean": float(norms.mean()), "median": float(np.median(norms)),
                 "min": float(norms.min()), "max": float(norms.max())}
    notes = "DeepFool perturbations are not clipped to the input range" if config.kind == "deepfool" else ""
    return RobustnessResult(config.kind, len(labels), float(np.mean(clean == labels)),
                            float(np.mean(attacked == labels)), stalls, stats, asdict(config), items, notes)
