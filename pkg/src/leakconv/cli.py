"""``leakconv`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Relative output paths are resolved against ``$LEAKCONV_OUTPUT_ROOT`` when set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .attacks import AttackConfig, evaluate_robustness
from .datasets import FormatError, LabeledDataset, SineImageSpec, find_cifar10, gen_fft_dataset, load_cifar10
from .io import write_pgm, write_spectrum_pgm
from .nn import NumericError, load_checkpoint
from .ortho import ortho_report
from .spectral import center_shift, kernel_frequency_response, leakage_metrics, mean_out_of_band_fraction
from .tensor import Rng, SizeError, save_tensor
from .windows import WindowSpec, make_window

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("leakconv")


def out_path(p: str | Path) -> Path:
    p = Path(p)
    root = os.environ.get(harness.OUTPUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=harness._json_default) + "\n")
    return path


def _maybe_config(args) -> harness.ExperimentConfig | None:
    if getattr(args, "config", None):
        return harness.load_config(args.config)
    if getattr(args, "preset", None):
        return harness.load_preset(args.preset)
    return None


def _pick(flag, default):
    return default if flag is None else flag


def _checkpoint_dir(path: str) -> Path:
    p = Path(path)
    if (p / "manifest.json").is_file():
        return p
    if (p / "checkpoint" / "manifest.json").is_file():
        return p / "checkpoint"
    raise harness.DataError(f"no checkpoint manifest under {p}")


def _load_eval_set(path: str) -> LabeledDataset:
    if find_cifar10(path) is not None:
        return load_cifar10(path, "test")
    p = Path(path)
    if not (p / "validation_meta.json").is_file():
        raise harness.DataError(f"{p} holds neither CIFAR-10 batches nor a saved validation split")
    return LabeledDataset.load(p, "validation")


# -- subcommands


def cmd_gen_data(args) -> int:
    cfg = _maybe_config(args)
    d = cfg.dataset if cfg else harness.DatasetConfig()
    if args.task != "fft":
        raise harness.ConfigError("only --task fft generates data; classification sets are read from disk")
    size, n_train = _pick(args.size, d.size), _pick(args.train, d.train)
    n_val, seed = _pick(args.val, d.val), _pick(args.seed, d.seed)
    train, val = gen_fft_dataset(Rng(seed), n_train, n_val, SineImageSpec(size))
    out = out_path(args.out)
    files = train.save(out) + val.save(out)
    print(f"wrote {len(files)} files to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _maybe_config(args)
    if cfg is None:
        raise harness.ConfigError("train needs --config FILE or --preset NAME")
    overrides = {
        "seeds": [int(s) for s in args.seeds.split(",")] if args.seeds else None,
        "train.epochs": args.epochs,
        "train.batch_size": args.batch_size,
        "train.initial_lr": args.lr,
        "scale": args.scale,
        "output_dir": args.output_dir,
        "dataset.path": args.dataset_path,
        "plots": False if args.no_plots else None,
    }
    cfg = harness.apply_overrides(cfg, **overrides)
    report = harness.run_experiment(cfg)
    print(f"{cfg.name}: config {report.config_hash[:12]}, {len(report.artifacts)} artifacts in {report.output_dir}")
    for vname, v in report.variants.items():
        fm = v["aggregate"]["final_metric"]
        std = f" +- {fm['std']:.6g}" if "std" in fm else ""
        print(f"  {vname}: final {report.metric} {fm['mean']:.6g}{std} (n={fm['n']})")
    return EXIT_OK


def cmd_analyze_spectrum(args) -> int:
    cfg = _maybe_config(args)
    grid = _pick(args.grid, cfg.analysis.spectrum_grid if cfg else 64)
    thr = _pick(args.threshold_db, cfg.analysis.leakage_threshold_db if cfg else -6.0)
    out = out_path(args.out)
    if args.window:
        win = make_window(WindowSpec(args.window, args.k))
        s = kernel_frequency_response(win.coeffs, max(grid, args.k))
        rep = leakage_metrics(s, thr)
        save_tensor(out / "spectrum.bin", s.mag)
        write_spectrum_pgm(out / "spectrum.pgm", center_shift(s.mag))
        _write_json(out / "leakage.json", {"window": args.window, "k": args.k, "grid": s.size, **rep.as_dict()})
        print(f"{args.window} k={args.k}: peak sidelobe {rep.sidelobe_db:.2f} dB, "
              f"out-of-band fraction {rep.out_of_band_energy_fraction:.4f}")
        return EXIT_OK
    if not args.checkpoint:
        raise harness.ConfigError("analyze-spectrum needs --checkpoint PATH or --window FAMILY --k K")
    model, _ = load_checkpoint(_checkpoint_dir(args.checkpoint))
    names = [f"conv{i}" for i in range(len(model.convs))]
    layers = [args.layer] if args.layer else names
    summary = {}
    for name in layers:
        if name not in names:
            raise harness.ConfigError(f"unknown layer {name!r}; model has {names}")
        k = model.convs[names.index(name)].effective_kernel()
        p = max(grid, k.shape[0])
        mags = np.stack([np.stack([kernel_frequency_response(k[:, :, c, m], p).mag for m in range(k.shape[3])])
                         for c in range(k.shape[2])])  # [C, M, p, p]
        save_tensor(out / f"{name}_spectra.bin", mags)
        write_spectrum_pgm(out / f"{name}_spectra_c0.pgm", _mosaic([center_shift(m) for m in mags[0]]))
        summary[name] = {"mean_out_of_band_fraction": mean_out_of_band_fraction(k, p, thr),
                         "kernel_shape": list(k.shape)}
        if args.plots:
            from .plotting import plot_kernel_spectra
            plot_kernel_spectra(out / f"{name}_spectra.png", k, p)
    _write_json(out / "leakage.json", {"grid": grid, "threshold_db": thr, "layers": summary})
    for name, s in summary.items():
        print(f"{name}: mean out-of-band fraction {s['mean_out_of_band_fraction']:.4f}")
    return EXIT_OK


def _mosaic(tiles: list[np.ndarray]) -> np.ndarray:
    n = len(tiles)
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    h, w = tiles[0].shape
    floor = min(float(t.min()) for t in tiles)
    out = np.full((rows * (h + 1), cols * (w + 1)), floor)
    for i, t in enumerate(tiles):
        r, c = divmod(i, cols)
        out[r * (h + 1) : r * (h + 1) + h, c * (w + 1) : c * (w + 1) + w] = t
    return out


def cmd_analyze_ortho(args) -> int:
    cfg = _maybe_config(args)
    model, _ = load_checkpoint(_checkpoint_dir(args.checkpoint))
    shape = args.input_shape or (cfg.analysis.ortho_input_shape if cfg else None)
    shape = tuple(int(v) for v in shape.split(",")) if isinstance(shape, str) else (tuple(shape) if shape else None)
    seed = _pick(args.seed, cfg.seeds[0] if cfg else 0)
    rep = ortho_report(model, shape, Rng(seed))
    _write_json(out_path(args.out), rep.as_dict())
    for layer in rep.layers:
        print(f"{layer.name}: D={layer.D:.6f} chance_D={layer.chance_D:.6f} ({layer.n_rows} rows)")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _maybe_config(args)
    base = cfg.attacks[0] if cfg and cfg.attacks else harness.AttackSection()
    acfg = AttackConfig(_pick(args.kind, base.kind), _pick(args.max_iter, base.max_iter),
                        _pick(args.overshoot, base.overshoot), _pick(args.tr, base.tr),
                        _pick(args.rot, base.rot), _pick(args.grid_steps, base.grid_steps))
    model, _ = load_checkpoint(_checkpoint_dir(args.checkpoint))
    res = evaluate_robustness(model, _load_eval_set(args.dataset), acfg, _pick(args.limit, base.limit))
    _write_json(out_path(args.out), res.as_dict(with_items=args.items))
    print(f"{acfg.kind}: clean {res.clean_accuracy:.4f} attacked {res.attacked_accuracy:.4f} "
          f"(n={res.n}, stalls={res.stalls})")
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        a, b = harness.load_report(args.report_a), harness.load_report(args.report_b)
    except FileNotFoundError as exc:
        raise harness.DataError(str(exc)) from exc
    header, rows = harness.compare_runs(a, b, args.variant_a, args.variant_b)
    text = harness.format_csv(header, rows)
    if args.out:
        out = out_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        final = [r for r in rows if r[0] == "mean" and r[1] == "final"][0]
        print(f"final delta (b - a): {final[4]:.6g}; table written to {out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_dump_kernels(args) -> int:
    model, _ = load_checkpoint(_checkpoint_dir(args.checkpoint))
    files = harness.dump_kernels(model, args.layer, out_path(args.out), args.grid)
    print(f"wrote {len(files)} PGM files to {out_path(args.out)}")
    return EXIT_OK


def cmd_dump_window(args) -> int:
    win = make_window(WindowSpec(args.family, args.k, args.k_cols))
    out = out_path(args.out)
    stem = f"{args.family}_{win.coeffs.shape[0]}x{win.coeffs.shape[1]}"
    save_tensor(out / f"{stem}.bin", win.coeffs)
    write_pgm(out / f"{stem}.pgm", win.coeffs, 0.0, 1.0)
    print(f"wrote {stem}.bin/.json/.pgm to {out}")
    return EXIT_OK


def cmd_presets(args) -> int:
    for name in harness.preset_names():
        cfg = harness.load_preset(name)
        print(f"{name}: {cfg.description}")
    return EXIT_OK


# -- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="leakconv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="experiment JSON supplying defaults")
        sp.set_defaults(fn=fn)
        return sp

    g = add("gen-data", cmd_gen_data, "generate the sine-image FFT-regression dataset")
    g.add_argument("--task", default="fft")
    g.add_argument("--size", type=int)
    g.add_argument("--train", type=int)
    g.add_argument("--val", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)

    t = add("train", cmd_train, "run an experiment config (all variants x seeds)")
    t.add_argument("--preset", help="bundled preset name, e.g. fig5_fftreg")
    t.add_argument("--seeds", help="comma-separated seed list")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--scale", type=float)
    t.add_argument("--output-dir")
    t.add_argument("--dataset-path")
    t.add_argument("--no-plots", action="store_true")

    s = add("analyze-spectrum", cmd_analyze_spectrum, "kernel or window frequency responses and leakage")
    s.add_argument("--checkpoint")
    s.add_argument("--layer")
    s.add_argument("--window", choices=["rectangular", "hamming"])
    s.add_argument("--k", type=int, default=16)
    s.add_argument("--grid", type=int)
    s.add_argument("--threshold-db", type=float)
    s.add_argument("--plots", action="store_true", help="also render PNG kernel/spectrum panels")
    s.add_argument("--out", required=True)

    o = add("analyze-ortho", cmd_analyze_ortho, "per-layer orthogonality deviation vs a fresh init")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--input-shape", help="C,H,W (defaults to the model input)")
    o.add_argument("--seed", type=int)
    o.add_argument("--out", required=True)

    a = add("attack", cmd_attack, "DeepFool or spatial-grid robustness evaluation")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--dataset", required=True, help="CIFAR-10 batch dir or a saved dataset dir")
    a.add_argument("--kind", choices=["deepfool", "spatial"])
    a.add_argument("--max-iter", type=int)
    a.add_argument("--overshoot", type=float)
    a.add_argument("--tr", type=float)
    a.add_argument("--rot", type=float)
    a.add_argument("--grid-steps", type=int)
    a.add_argument("--limit", type=int)
    a.add_argument("--items", action="store_true", help="include per-sample results")
    a.add_argument("--out", required=True)

    c = add("compare", cmd_compare, "per-epoch metric deltas between two runs")
    c.add_argument("report_a")
    c.add_argument("report_b")
    c.add_argument("--variant-a")
    c.add_argument("--variant-b")
    c.add_argument("--out")

    k = add("dump-kernels", cmd_dump_kernels, "kernel slices and their spectra as PGM")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--layer", default="conv0")
    k.add_argument("--grid", type=int, default=64)
    k.add_argument("--out", required=True)

    w = add("dump-window", cmd_dump_window, "window coefficients as raw tensor + PGM")
    w.add_argument("--family", default="hamming", choices=["rectangular", "hamming"])
    w.add_argument("--k", type=int, required=True)
    w.add_argument("--k-cols", type=int)
    w.add_argument("--out", required=True)

    add("presets", cmd_presets, "list bundled experiment presets")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (harness.DataError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (harness.ConfigError, SizeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
