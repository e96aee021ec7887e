"""Declarative experiment runner.

An experiment is a JSON document (see ``presets/``) naming a task, a dataset,
a base model, optional model variants, the training recipe, analyses and an
attack. ``run_experiment`` trains every variant under every seed and writes
per-seed metric CSVs, checkpoints, analysis JSON and an index of everything
it wrote (``report.json``).
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from . import nn
from .attacks import AttackConfig, evaluate_robustness
from .datasets import (LabeledDataset, SineImageSpec, bilinear_subsample, find_cifar10, gen_fft_dataset,
                       load_cifar10, load_idx)
from .ortho import ortho_report
from .spectral import kernel_frequency_response, mean_out_of_band_fraction
from .tensor import Rng

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "LEAKCONV_OUTPUT_ROOT"
CIFAR_ENV = "LEAKCONV_CIFAR10_DIR"


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


def _strict(cls, data: dict | None, where: str):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class DatasetConfig:
    kind: str = "sine_fft"  # sine_fft | cifar10 | idx | saved
    size: int = 32
    train: int = 10000
    val: int = 1000
    seed: int = 1234
    path: str | None = None
    train_images: str | None = None
    train_labels: str | None = None
    val_images: str | None = None
    val_labels: str | None = None
    subsample: bool = False

    def __post_init__(self):
        if self.kind not in ("sine_fft", "cifar10", "idx", "saved"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")


@dataclass
class ModelConfig:
    # fft_regression uses k and window (none|rectangular|hamming)
    # classification uses every field, window being the placement none|first|all
    k: int = 7
    window: str = "none"
    window_family: str = "hamming"
    depth: int = 2
    h1: int = 32
    h2: int = 128
    k_first: int = 7
    downsampling: str = "strided_conv"
    num_classes: int = 10


@dataclass
class TrainSection:
    epochs: int = 50
    batch_size: int = 32
    initial_lr: float = 0.01
    lr_decay_epochs: list = field(default_factory=list)
    lr_decay_factor: float = 0.1
    shuffle: bool = True
    augmentation: bool = False
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    weight_decay: float = 0.0


@dataclass
class AnalysisSection:
    spectra: bool = False
    spectrum_grid: int = 64
    leakage_threshold_db: float = -6.0
    ortho: bool = False
    ortho_input_shape: list | None = None


@dataclass
class AttackSection:
    kind: str = "deepfool"
    max_iter: int = 100
    overshoot: float = 0.02
    tr: float = 12.5
    rot: float = 22.5
    grid_steps: int = 5
    limit: int | None = None

    def to_config(self) -> AttackConfig:
        return AttackConfig(self.kind, self.max_iter, self.overshoot, self.tr, self.rot, self.grid_steps)


@dataclass
class ExperimentConfig:
    name: str
    task: str
    dataset: DatasetConfig
    model: ModelConfig
    train: TrainSection
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    attacks: list[AttackSection] = field(default_factory=list)
    variants: list[dict] = field(default_factory=list)
    output_dir: str = "runs"
    seeds: list[int] = field(default_factory=lambda: [0])
    scale: float = 1.0
    plots: bool = True
    description: str = ""

    @property
    def raw(self) -> dict:
        return _config_to_dict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def variant_models(self) -> list[tuple[str, ModelConfig]]:
        if not self.variants:
            return [("default", self.model)]
        out = []
        for i, v in enumerate(self.variants):
            v = dict(v)
            name = v.pop("name", f"variant{i}")
            merged = {**dataclasses.asdict(self.model), **v}
            out.append((name, _strict(ModelConfig, merged, f"variants[{i}]")))
        return out


TOP_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)} | {"attack"}


def _config_to_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    return d


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("experiment config must be a JSON object")
    unknown = sorted(set(data) - TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    for req in ("name", "task", "dataset", "model", "train"):
        if req not in data:
            raise ConfigError(f"missing required key {req!r}")
    if data["task"] not in nn.TASKS:
        raise ConfigError(f"task must be one of {nn.TASKS}, got {data['task']!r}")
    attacks = data.get("attacks", [])
    if "attack" in data:
        attacks = list(attacks) + ([data["attack"]] if data["attack"] else [])
    seeds = data.get("seeds", [0])
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    cfg = ExperimentConfig(
        name=str(data["name"]),
        task=data["task"],
        dataset=_strict(DatasetConfig, data["dataset"], "dataset"),
        model=_strict(ModelConfig, data["model"], "model"),
        train=_strict(TrainSection, data["train"], "train"),
        analysis=_strict(AnalysisSection, data.get("analysis"), "analysis"),
        attacks=[_strict(AttackSection, a, f"attack[{i}]") for i, a in enumerate(attacks)],
        variants=list(data.get("variants", [])),
        output_dir=str(data.get("output_dir", "runs")),
        seeds=list(seeds),
        scale=float(data.get("scale", 1.0)),
        plots=bool(data.get("plots", True)),
        description=str(data.get("description", "")),
    )
    if cfg.scale <= 0:
        raise ConfigError("scale must be positive")
    if cfg.train.optimizer not in ("sgd_momentum", "adam"):
        raise ConfigError(f"train.optimizer must be sgd_momentum or adam, got {cfg.train.optimizer!r}")
    for name, mc in cfg.variant_models():
        try:
            build_spec(cfg, mc, (1, 8, 8))
        except ValueError as exc:
            raise ConfigError(f"model/variant {name!r}: {exc}") from exc
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(data)


def preset_names() -> list[str]:
    return sorted(p.name for p in resources.files("leakconv.presets").iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> ExperimentConfig:
    if not name.endswith(".json"):
        name += ".json"
    res = resources.files("leakconv.presets") / name
    if not res.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {preset_names()}")
    return parse_config(json.loads(res.read_text()))


def apply_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted-path overrides, e.g. ``{"train.epochs": 2}``."""
    data = copy.deepcopy(cfg.raw)
    for key, value in overrides.items():
        if value is None:
            continue
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return parse_config(data)


# -- datasets


def _scaled(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


def build_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = cfg.dataset
    n_train, n_val = _scaled(d.train, cfg.scale), _scaled(d.val, cfg.scale)
    if d.kind == "sine_fft":
        return gen_fft_dataset(Rng(d.seed), n_train, n_val, SineImageSpec(d.size))
    if d.kind == "saved":
        if not d.path:
            raise ConfigError("dataset.path is required for kind 'saved'")
        try:
            train = LabeledDataset.load(d.path, "train")
            val = LabeledDataset.load(d.path, "validation")
        except FileNotFoundError as exc:
            raise DataError(f"saved dataset incomplete under {d.path}: {exc}") from exc
    elif d.kind == "cifar10":
        root = d.path or os.environ.get(CIFAR_ENV)
        if find_cifar10(root) is None:
            raise DataError(f"CIFAR-10 binary batches not found (dataset.path={d.path!r}, ${CIFAR_ENV}="
                            f"{os.environ.get(CIFAR_ENV)!r}); download cifar-10-binary.tar.gz and extract it")
        train = load_cifar10(root, "train")
        val = load_cifar10(root, "test")
        val.split = "validation"
    else:
        paths = [d.train_images, d.train_labels, d.val_images, d.val_labels]
        if not all(paths):
            raise ConfigError("idx datasets need train_images, train_labels, val_images and val_labels")
        missing = [p for p in paths if not Path(p).exists()]
        if missing:
            raise DataError(f"IDX files not found: {missing}")
        train = load_idx(d.train_images, d.train_labels, cfg.model.num_classes, "train")
        val = load_idx(d.val_images, d.val_labels, cfg.model.num_classes, "validation")
    if d.subsample:
        train = LabeledDataset(bilinear_subsample(train.images), train.targets, train.split, train.num_classes)
        val = LabeledDataset(bilinear_subsample(val.images), val.targets, val.split, val.num_classes)
    sub_rng = Rng(d.seed, (5,))
    train = train.subset(n_train, sub_rng.substream(0)) if n_train < len(train) else train
    val = val.subset(n_val, sub_rng.substream(1)) if n_val < len(val) else val
    return train, val


def build_spec(cfg: ExperimentConfig, mc: ModelConfig, input_shape) -> nn.ModelSpec:
    if cfg.task == "fft_regression":
        window = None if mc.window == "none" else mc.window
        return nn.fft_regression_spec(input_shape[-1], mc.k, window)
    h1 = _scaled(mc.h1, cfg.scale)
    h2 = _scaled(mc.h2, cfg.scale)
    return nn.classifier_spec(input_shape, mc.depth, h1, h2, mc.k_first, mc.k, mc.window, mc.downsampling,
                              mc.num_classes, mc.window_family)


def build_optimizer(t: TrainSection) -> nn.OptimizerState:
    if t.optimizer == "adam":
        return nn.adam(t.initial_lr, weight_decay=t.weight_decay)
    return nn.sgd(t.initial_lr, t.momentum, t.weight_decay)


# -- artifact bookkeeping


class ArtifactIndex:
    """Every file the run writes goes through here so report.json can list it."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []

    def add(self, *paths: Path) -> None:
        for p in paths:
            rel = str(Path(p).resolve().relative_to(self.root.resolve()))
            if rel not in self.files:
                self.files.append(rel)

    def write_text(self, path: Path, text: str) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.add(path)
        return path

    def write_json(self, path: Path, obj) -> Path:
        return self.write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")

    def write_csv(self, path: Path, header: list[str], rows: list[list]) -> Path:
        return self.write_text(path, format_csv(header, rows))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def format_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def mean_std(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    out = {"n": int(v.size), "mean": float(v.mean())}
    if v.size >= 2:
        out["std"] = float(v.std(ddof=1))
    return out


# -- the run


@dataclass
class RunReport:
    name: str
    task: str
    config_hash: str
    metric: str
    variants: dict
    wall_clock: float
    artifacts: list[str]
    output_dir: str

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def variant(self, name: str) -> dict:
        return self.variants[name]


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out / cfg.name


def run_experiment(cfg: ExperimentConfig, datasets: tuple | None = None) -> RunReport:
    """Train and analyse every (variant, seed) pair; write all artifacts under the output dir."""
    t0 = time.perf_counter()
    out_dir = resolve_output_dir(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = ArtifactIndex(out_dir)
    train_set, val_set = datasets if datasets is not None else build_datasets(cfg)
    input_shape = train_set.images.shape[1:]
    index.write_json(out_dir / "config.json", cfg.raw)

    variants: dict[str, Any] = {}
    metric = "val_mse" if cfg.task == "fft_regression" else "val_accuracy"
    for vname, mc in cfg.variant_models():
        spec = build_spec(cfg, mc, input_shape)
        per_seed = {}
        for seed in cfg.seeds:
            per_seed[str(seed)] = _run_one(cfg, spec, seed, train_set, val_set, out_dir / vname / f"seed{seed}", index)
        variants[vname] = {"model": dataclasses.asdict(mc), "spec": spec.to_dict(),
                           "num_parameters": nn.param_count(spec), "seeds": per_seed,
                           "aggregate": _aggregate(cfg, per_seed, out_dir / vname, index)}
        log.info("%s/%s final %s %s", cfg.name, vname, metric, variants[vname]["aggregate"]["final_metric"])

    if cfg.plots:
        from .plotting import plot_learning_curves
        index.add(*plot_learning_curves(out_dir, cfg, variants, metric))

    report = RunReport(cfg.name, cfg.task, cfg.config_hash(), metric, variants, time.perf_counter() - t0,
                       [], str(out_dir))
    index.add(out_dir / "report.json")
    report.artifacts = list(index.files)
    (out_dir / "report.json").write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True,
                                                    default=_json_default) + "\n")
    return report


def _run_one(cfg, spec, seed, train_set, val_set, run_dir: Path, index: ArtifactIndex) -> dict:
    model = nn.model_init(spec, Rng(seed))
    opt = build_optimizer(cfg.train)
    tcfg = nn.TrainConfig(cfg.train.epochs, cfg.train.batch_size, cfg.train.initial_lr,
                          list(cfg.train.lr_decay_epochs), cfg.train.lr_decay_factor, seed,
                          cfg.train.shuffle, cfg.train.augmentation)
    rep = nn.train(model, train_set, tcfg, opt, val_set)
    index.write_csv(run_dir / "metrics.csv", ["epoch", "train_loss", "val_metric", "lr"],
                    [[r.epoch, r.train_loss, r.val_metric, r.lr] for r in rep.records])
    index.add(*nn.save_checkpoint(run_dir / "checkpoint", model, opt, cfg.train.epochs))
    result: dict[str, Any] = {"final_metric": rep.final, "train_seconds": rep.wall_clock}

    if cfg.analysis.spectra:
        per_layer = {}
        for i, layer in enumerate(model.convs):
            per_layer[f"conv{i}"] = mean_out_of_band_fraction(
                layer.effective_kernel(), cfg.analysis.spectrum_grid, cfg.analysis.leakage_threshold_db)
        result["out_of_band_fraction"] = per_layer
        index.write_json(run_dir / "leakage.json", {
            "metric": "mean out-of-band energy fraction of effective kernels (library-defined leakage metric)",
            "threshold_db": cfg.analysis.leakage_threshold_db, "grid": cfg.analysis.spectrum_grid,
            "layers": per_layer})
    if cfg.analysis.ortho:
        shape = tuple(cfg.analysis.ortho_input_shape) if cfg.analysis.ortho_input_shape else None
        orep = ortho_report(model, shape, Rng(seed))
        result["ortho"] = orep.as_dict()["layers"]
        index.write_json(run_dir / "ortho.json", orep.as_dict())
    if cfg.attacks:
        result["attacks"] = []
        for a in cfg.attacks:
            res = evaluate_robustness(model, val_set, a.to_config(), a.limit)
            tag = _attack_tag(a)
            result["attacks"].append({"tag": tag, **res.as_dict()})
            index.write_json(run_dir / f"attack_{tag}.json", res.as_dict(with_items=True))
    index.write_json(run_dir / "summary.json", result)
    return result


def _attack_tag(a: AttackSection) -> str:
    if a.kind == "deepfool":
        return f"deepfool_it{a.max_iter}"
    return f"spatial_tr{a.tr:g}_rot{a.rot:g}"


def _aggregate(cfg, per_seed: dict, vdir: Path, index: ArtifactIndex) -> dict:
    seeds = list(per_seed)
    curves = [read_csv(vdir / f"seed{s}" / "metrics.csv") for s in seeds]
    rows = []
    for e in range(len(curves[0])):
        vals = [float(c[e]["val_metric"]) for c in curves]
        ms = mean_std(vals)
        rows.append([e, ms["mean"], ms.get("std", ""), ms["n"]])
    index.write_csv(vdir / "aggregate.csv", ["epoch", "val_metric_mean", "val_metric_std", "n_seeds"], rows)
    agg: dict[str, Any] = {"final_metric": mean_std([per_seed[s]["final_metric"] for s in seeds])}
    first = per_seed[seeds[0]]
    if "out_of_band_fraction" in first:
        agg["out_of_band_fraction"] = {
            layer: mean_std([per_seed[s]["out_of_band_fraction"][layer] for s in seeds])
            for layer in first["out_of_band_fraction"]}
    if "ortho" in first:
        agg["ortho"] = [{"name": l["name"],
                         "D": mean_std([per_seed[s]["ortho"][i]["D"] for s in seeds]),
                         "chance_D": mean_std([per_seed[s]["ortho"][i]["chance_D"] for s in seeds])}
                        for i, l in enumerate(first["ortho"])]
    if "attacks" in first:
        agg["attacks"] = [{"tag": a["tag"],
                           "clean_accuracy": mean_std([per_seed[s]["attacks"][i]["clean_accuracy"] for s in seeds]),
                           "attacked_accuracy": mean_std([per_seed[s]["attacks"][i]["attacked_accuracy"] for s in seeds])}
                          for i, a in enumerate(first["attacks"])]
    return agg


# -- comparisons


def load_report(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return json.loads(path.read_text())


def _variant_curves(report: dict, variant: str | None, out_dir: Path | None) -> tuple[str, dict[str, list[float]]]:
    variants = report["variants"]
    if variant is None:
        if len(variants) != 1:
            raise ConfigError(f"report has variants {sorted(variants)}; name one")
        variant = next(iter(variants))
    if variant not in variants:
        raise ConfigError(f"variant {variant!r} not in report (have {sorted(variants)})")
    root = Path(report["output_dir"]) if out_dir is None else out_dir
    curves = {}
    for seed in variants[variant]["seeds"]:
        rows = read_csv(root / variant / f"seed{seed}" / "metrics.csv")
        curves[seed] = [float(r["val_metric"]) for r in rows]
    return variant, curves


def compare_runs(report_a: dict, report_b: dict, variant_a: str | None = None,
                 variant_b: str | None = None) -> tuple[list[str], list[list]]:
    """Per-epoch and final deltas (b - a) of the validation metric.

    Seeds present in both reports are paired; a ``mean`` row set compares the
    seed-averaged curves.
    """
    if report_a["task"] != report_b["task"] or report_a["metric"] != report_b["metric"]:
        raise ConfigError(f"cannot compare {report_a['task']}/{report_a['metric']} "
                          f"with {report_b['task']}/{report_b['metric']}")
    va, ca = _variant_curves(report_a, variant_a, None)
    vb, cb = _variant_curves(report_b, variant_b, None)
    header = ["seed", "epoch", f"{report_a['metric']}_a", f"{report_b['metric']}_b", "delta"]
    rows = []
    for seed in [s for s in ca if s in cb]:
        for e, (x, y) in enumerate(zip(ca[seed], cb[seed])):
            rows.append([seed, e, x, y, y - x])
        rows.append([seed, "final", ca[seed][-1], cb[seed][-1], cb[seed][-1] - ca[seed][-1]])
    ma = np.mean(np.array(list(ca.values())), axis=0)
    mb = np.mean(np.array(list(cb.values())), axis=0)
    for e, (x, y) in enumerate(zip(ma, mb)):
        rows.append(["mean", e, float(x), float(y), float(y - x)])
    rows.append(["mean", "final", float(ma[-1]), float(mb[-1]), float(mb[-1] - ma[-1])])
    return header, rows


# -- kernel dumps


def dump_kernels(model: nn.Model, layer: str, out_dir: str | Path, grid: int = 64) -> list[Path]:
    """Write every (c, m) slice of a layer's effective kernel as a PGM, plus its frequency response.

    Kernel images land in ``out_dir/kernels`` (exactly C*M files) and log-magnitude
    spectra in ``out_dir/spectra``.
    """
    from .io import write_pgm, write_spectrum_pgm

    names = [f"conv{i}" for i in range(len(model.convs))]
    if layer not in names:
        raise ConfigError(f"unknown layer {layer!r}; model has {names}")
    k = model.convs[names.index(layer)].effective_kernel()
    out_dir = Path(out_dir)
    files = []
    for c in range(k.shape[2]):
        for m in range(k.shape[3]):
            sl = k[:, :, c, m]
            files.append(write_pgm(out_dir / "kernels" / f"{layer}_c{c:03d}_m{m:04d}.pgm", sl))
            spec = kernel_frequency_response(sl, max(grid, *sl.shape))
            files.append(write_spectrum_pgm(out_dir / "spectra" / f"{layer}_c{c:03d}_m{m:04d}.pgm", spec.mag))
    return files
