import json
import os
from pathlib import Path

import numpy as np
import pytest

from leakconv import harness
from leakconv.cli import main
from leakconv.datasets import LabeledDataset
from leakconv.io import read_pgm
from leakconv.nn import classifier_spec, load_checkpoint, model_init, save_checkpoint, sgd
from leakconv.tensor import Rng, load_tensor
from leakconv.windows import WindowSpec, make_window

FFT_CFG = {
    "name": "tiny_fft",
    "task": "fft_regression",
    "dataset": {"kind": "sine_fft", "size": 8, "train": 24, "val": 8, "seed": 3},
    "model": {"k": 3},
    "train": {"epochs": 3, "batch_size": 8, "initial_lr": 1e-3, "optimizer": "adam"},
    "analysis": {"spectra": True, "spectrum_grid": 16},
    "variants": [{"name": "baseline_k3", "window": "none", "k": 3},
                 {"name": "hamming_k5", "window": "hamming", "k": 5}],
    "seeds": [0, 1],
    "plots": False,
}


def _cls_dataset_dir(tmp_path: Path) -> Path:
    rng = np.random.default_rng(0)
    d = tmp_path / "cls_data"
    for split, n in (("train", 24), ("validation", 8)):
        LabeledDataset(rng.uniform(0, 1, (n, 3, 8, 8)), rng.integers(0, 3, n), split, 3).save(d)
    return d


def _cls_cfg(data_dir: Path) -> dict:
    return {
        "name": "tiny_cls",
        "task": "classification",
        "dataset": {"kind": "saved", "path": str(data_dir), "train": 24, "val": 8},
        "model": {"depth": 2, "h1": 4, "h2": 4, "k_first": 3, "k": 3, "num_classes": 3},
        "train": {"epochs": 2, "batch_size": 8, "initial_lr": 0.01, "augmentation": True},
        "analysis": {"ortho": True, "ortho_input_shape": [3, 8, 8]},
        "attack": {"kind": "spatial", "tr": 12.5, "rot": 22.5, "grid_steps": 3, "limit": 4},
        "variants": [{"name": "baseline", "window": "none"}, {"name": "hamming_all", "window": "all"}],
        "seeds": [0, 1],
        "plots": False,
    }


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    root = tmp_path / "out"
    monkeypatch.setenv(harness.OUTPUT_ROOT_ENV, str(root))
    return root


def _write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


@pytest.fixture
def fft_run(out_root):
    return harness.run_experiment(harness.parse_config(FFT_CFG))


# -- schema


@pytest.mark.parametrize("bad", [
    {"extra": 1},
    {"train": {**FFT_CFG["train"], "epochz": 3}},
    {"model": {"k": 3, "colour": "red"}},
    {"task": "segmentation"},
    {"seeds": []},
    {"variants": [{"name": "x", "windw": "hamming"}]},
    {"train": {**FFT_CFG["train"], "optimizer": "rmsprop"}},
])
def test_strict_schema_rejects(bad):
    with pytest.raises(harness.ConfigError):
        harness.parse_config({**FFT_CFG, **bad})


def test_window_placement_maps_to_layers():
    base = {"depth": 3, "h1": 4, "h2": 4, "k_first": 3, "k": 3, "num_classes": 3}
    cfg = harness.parse_config({**_cls_cfg(Path(".")), "model": base, "variants": [
        {"name": "none", "window": "none"}, {"name": "first", "window": "first"}, {"name": "all", "window": "all"}]})
    windows = {name: [c.window for c in harness.build_spec(cfg, mc, (3, 8, 8)).conv_specs()]
               for name, mc in cfg.variant_models()}
    assert windows == {"none": [None] * 3, "first": ["hamming", None, None], "all": ["hamming"] * 3}


def test_all_presets_parse():
    names = harness.preset_names()
    for expected in ("fig5_fftreg.json", "fig6a_depth_sweep.json", "fig7a_kernel_scan.json", "table2_attacks.json"):
        assert expected in names
    for n in names:
        cfg = harness.load_preset(n)
        assert cfg.name == n[:-5] and cfg.variant_models()
    full = harness.load_preset("fig5_fftreg")
    assert (full.dataset.size, full.dataset.train, full.dataset.val) == (32, 10000, 1000)
    assert {n: mc.k for n, mc in full.variant_models()} == {"baseline_k7": 7, "hamming_k11": 11}
    sweep = harness.load_preset("fig6a_depth_sweep")
    assert sorted({mc.depth for _, mc in sweep.variant_models()}) == [2, 3, 4, 5, 6]
    assert all((mc.h1, mc.h2, mc.k_first) == (32, 128, 7) for _, mc in sweep.variant_models()
               if mc.k_first == 7)
    scan = harness.load_preset("fig7a_kernel_scan")
    assert sorted({mc.k for _, mc in scan.variant_models()}) == [3, 5, 7, 9, 11]
    with pytest.raises(harness.ConfigError):
        harness.load_preset("nope")


def test_config_hash_and_overrides():
    cfg = harness.parse_config(FFT_CFG)
    assert cfg.config_hash() == harness.parse_config(json.loads(json.dumps(FFT_CFG))).config_hash()
    other = harness.apply_overrides(cfg, **{"train.epochs": 5, "seeds": [7]})
    assert other.train.epochs == 5 and other.seeds == [7] and cfg.train.epochs == 3
    assert other.config_hash() != cfg.config_hash()


# -- runs


def test_run_writes_indexed_artifacts(fft_run, out_root):
    out = Path(fft_run.output_dir)
    assert out == out_root / "runs" / "tiny_fft"
    on_disk = {str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()}
    assert on_disk == set(fft_run.artifacts)
    for v in ("baseline_k3", "hamming_k5"):
        for s in (0, 1):
            assert f"{v}/seed{s}/metrics.csv" in on_disk and f"{v}/seed{s}/leakage.json" in on_disk
    report = harness.load_report(out)
    assert report["config_hash"] == harness.parse_config(FFT_CFG).config_hash()
    assert report["metric"] == "val_mse" and report["wall_clock"] > 0


def test_csv_schema_and_aggregate_recomputes(fft_run):
    out = Path(fft_run.output_dir)
    for v in ("baseline_k3", "hamming_k5"):
        text = (out / v / "seed0" / "metrics.csv").read_text()
        assert text.splitlines()[0] == "epoch,train_loss,val_metric,lr"
        agg = harness.read_csv(out / v / "aggregate.csv")
        per_seed = [harness.read_csv(out / v / f"seed{s}" / "metrics.csv") for s in (0, 1)]
        assert len(agg) == 3
        for e, row in enumerate(agg):
            vals = np.array([float(c[e]["val_metric"]) for c in per_seed])
            assert abs(float(row["val_metric_mean"]) - vals.mean()) <= 1e-12 * abs(vals.mean())
            assert abs(float(row["val_metric_std"]) - vals.std(ddof=1)) <= 1e-12 * max(1.0, vals.std(ddof=1))
            assert row["n_seeds"] == "2"
        final = fft_run.variants[v]["aggregate"]["final_metric"]
        assert final["n"] == 2 and "std" in final


def test_single_seed_has_no_std(out_root):
    cfg = harness.apply_overrides(harness.parse_config(FFT_CFG), seeds=[4], name="one_seed")
    rep = harness.run_experiment(cfg)
    for v in rep.variants.values():
        assert "std" not in v["aggregate"]["final_metric"]
    rows = harness.read_csv(Path(rep.output_dir) / "baseline_k3" / "aggregate.csv")
    assert all(r["val_metric_std"] == "" for r in rows)


def test_rerun_is_bit_identical(out_root):
    cfg = harness.parse_config(FFT_CFG)
    a = Path(harness.run_experiment(cfg).output_dir)
    first = {p: p.read_bytes() for p in a.rglob("*.csv")}
    harness.run_experiment(cfg)
    assert first and all(p.read_bytes() == b for p, b in first.items())


def test_compare_identical_and_mismatch(fft_run, tmp_path):
    rep = harness.load_report(fft_run.output_dir)
    header, rows = harness.compare_runs(rep, rep, "baseline_k3", "baseline_k3")
    assert header == ["seed", "epoch", "val_mse_a", "val_mse_b", "delta"]
    assert rows and all(r[4] == 0.0 for r in rows)
    _, rows = harness.compare_runs(rep, rep, "baseline_k3", "hamming_k5")
    per_seed = [r for r in rows if r[0] == "0" and r[1] != "final"]
    assert len(per_seed) == 3 and all(r[4] == r[3] - r[2] for r in per_seed)
    with pytest.raises(harness.ConfigError):
        harness.compare_runs(rep, rep)  # two variants, none named
    other = dict(rep, task="classification", metric="val_accuracy")
    with pytest.raises(harness.ConfigError):
        harness.compare_runs(rep, other, "baseline_k3", "baseline_k3")


def test_cls_run_with_ortho_and_attack(out_root, tmp_path):
    cfg = harness.parse_config(_cls_cfg(_cls_dataset_dir(tmp_path)))
    rep = harness.run_experiment(cfg)
    out = Path(rep.output_dir)
    assert rep.metric == "val_accuracy"
    for v in ("baseline", "hamming_all"):
        seed = rep.variants[v]["seeds"]["0"]
        assert [l["name"] for l in seed["ortho"]] == ["conv0", "conv1"]
        att = seed["attacks"][0]
        assert att["tag"] == "spatial_tr12.5_rot22.5" and att["attacked_accuracy"] <= att["clean_accuracy"]
        assert (out / v / "seed0" / "attack_spatial_tr12.5_rot22.5.json").is_file()
        assert rep.variants[v]["aggregate"]["ortho"][0]["D"]["n"] == 2
    assert {str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()} == set(rep.artifacts)


def test_missing_cifar_is_data_error(out_root, monkeypatch):
    monkeypatch.delenv(harness.CIFAR_ENV, raising=False)
    cfg = harness.load_preset("suppB_ortho_attack_desk")
    with pytest.raises(harness.DataError, match="CIFAR-10"):
        harness.build_datasets(cfg)


# -- kernels


def _cls_model(window, seed=0):
    spec = classifier_spec((3, 16, 16), depth=2, h1=5, h2=4, k_first=7, k_block=7, window=window)
    return model_init(spec, Rng(seed))


def test_dump_kernels_count_and_taper(tmp_path):
    model = _cls_model("all")
    files = harness.dump_kernels(model, "conv0", tmp_path, grid=32)
    kernels = sorted((tmp_path / "kernels").glob("*.pgm"))
    assert len(kernels) == 3 * 5 and len(files) == 2 * 3 * 5
    k = model.convs[0].effective_kernel()
    ring = np.ones((7, 7), bool)
    ring[1:-1, 1:-1] = False
    for c in range(3):
        for m in range(5):
            a = np.abs(k[:, :, c, m])
            assert a[ring].mean() <= a[2:5, 2:5].mean()
    img = read_pgm(kernels[0])
    sl = k[:, :, 0, 0]
    assert img.shape == (7, 7) and img.min() == 0 and img.max() == 255
    assert img.flat[np.argmax(sl)] == 255 and img.flat[np.argmin(sl)] == 0
    with pytest.raises(harness.ConfigError):
        harness.dump_kernels(model, "conv9", tmp_path)


def test_checkpoint_round_trip(tmp_path):
    model = _cls_model("none", seed=3)
    save_checkpoint(tmp_path / "ck", model, sgd(0.01), 5)
    back, meta = load_checkpoint(tmp_path / "ck")
    for a, b in zip(model.parameters(), back.parameters()):
        assert np.array_equal(a, b)
    x = np.random.default_rng(0).normal(size=(2, 3, 16, 16))
    assert np.array_equal(model.forward(x), back.forward(x))


# -- CLI


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_exit_codes(tmp_path, out_root, monkeypatch, capsys):
    assert main(["train", "--config", str(_write_cfg(tmp_path, {**FFT_CFG, "bogus": 1}))]) == 2
    assert "bogus" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    monkeypatch.delenv(harness.CIFAR_ENV, raising=False)
    assert main(["train", "--preset", "suppB_ortho_attack_desk", "--epochs", "1"]) == 3
    assert "CIFAR-10" in capsys.readouterr().err
    blowup = {**FFT_CFG, "name": "blowup", "seeds": [0],
              "train": {"epochs": 2, "batch_size": 8, "initial_lr": 1e150, "optimizer": "sgd_momentum"}}
    assert main(["train", "--config", str(_write_cfg(tmp_path, blowup, "blowup.json"))]) == 4
    assert main(["attack", "--checkpoint", str(tmp_path / "nothing"), "--dataset", str(tmp_path),
                 "--out", "a.json"]) == 3


def test_cli_end_to_end(tmp_path, out_root, capsys):
    data = _cls_dataset_dir(tmp_path)
    cfg_path = _write_cfg(tmp_path, _cls_cfg(data))
    assert main(["train", "--config", str(cfg_path), "--seeds", "0", "--epochs", "1"]) == 0
    run = out_root / "runs" / "tiny_cls"
    ck = run / "baseline" / "seed0"
    assert "baseline" in capsys.readouterr().out

    assert main(["attack", "--checkpoint", str(ck), "--dataset", str(data), "--kind", "deepfool",
                 "--max-iter", "20", "--limit", "4", "--items", "--out", "att.json"]) == 0
    att = json.loads((out_root / "att.json").read_text())
    assert att["n"] == 4 and len(att["items"]) == 4 and att["attacked_accuracy"] <= att["clean_accuracy"]
    assert main(["attack", "--checkpoint", str(ck), "--dataset", str(data), "--kind", "spatial",
                 "--tr", "0", "--rot", "0", "--limit", "4", "--out", "sp.json"]) == 0
    sp = json.loads((out_root / "sp.json").read_text())
    assert sp["attacked_accuracy"] == sp["clean_accuracy"] == att["clean_accuracy"]

    assert main(["analyze-ortho", "--checkpoint", str(ck), "--input-shape", "3,8,8", "--seed", "0",
                 "--out", "ortho.json"]) == 0
    layers = json.loads((out_root / "ortho.json").read_text())["layers"]
    assert [l["name"] for l in layers] == ["conv0", "conv1"]

    assert main(["analyze-spectrum", "--checkpoint", str(ck), "--grid", "16", "--out", "spec"]) == 0
    leak = json.loads((out_root / "spec" / "leakage.json").read_text())
    assert set(leak["layers"]) == {"conv0", "conv1"}
    assert load_tensor(out_root / "spec" / "conv0_spectra.bin").shape == (3, 4, 16, 16)

    assert main(["dump-kernels", "--checkpoint", str(ck), "--layer", "conv1", "--out", "kern"]) == 0
    assert len(list((out_root / "kern" / "kernels").glob("*.pgm"))) == 4 * 4
    assert main(["dump-kernels", "--checkpoint", str(ck), "--layer", "conv5", "--out", "kern"]) == 2

    assert main(["compare", str(run), str(run), "--variant-a", "baseline", "--variant-b", "baseline",
                 "--out", "cmp.csv"]) == 0
    rows = harness.read_csv(out_root / "cmp.csv")
    assert rows and all(float(r["delta"]) == 0.0 for r in rows)


def test_cli_gen_data_and_windows(tmp_path, out_root, capsys):
    assert main(["gen-data", "--size", "8", "--train", "4", "--val", "2", "--seed", "1", "--out", "data"]) == 0
    train = LabeledDataset.load(out_root / "data", "train")
    assert train.images.shape == (4, 1, 8, 8) and train.targets.shape == (4, 64)
    assert main(["gen-data", "--task", "cifar", "--out", "data"]) == 2

    assert main(["dump-window", "--family", "hamming", "--k", "9", "--out", "win"]) == 0
    coeffs = load_tensor(out_root / "win" / "hamming_9x9.bin")
    np.testing.assert_array_equal(coeffs, make_window(WindowSpec("hamming", 9)).coeffs)
    img = read_pgm(out_root / "win" / "hamming_9x9.pgm")
    np.testing.assert_array_equal(img, np.rint(coeffs * 255).astype(np.uint8))

    assert main(["analyze-spectrum", "--window", "hamming", "--k", "16", "--grid", "1024", "--out", "ws"]) == 0
    ham = json.loads((out_root / "ws" / "leakage.json").read_text())
    assert main(["analyze-spectrum", "--window", "rectangular", "--k", "16", "--grid", "1024", "--out", "wr"]) == 0
    rect = json.loads((out_root / "wr" / "leakage.json").read_text())
    assert ham["sidelobe_db"] < rect["sidelobe_db"] - 20

    assert main(["presets"]) == 0
    assert "fig5_fftreg" in capsys.readouterr().out


def test_output_root_env_applies_to_relative_paths(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert main(["dump-window", "--k", "3", "--out", "w"]) == 0
    assert (tmp_path / "root" / "w" / "hamming_3x3.bin").is_file()
    monkeypatch.delenv(harness.OUTPUT_ROOT_ENV)
    cwd = os.getcwd()
    try:
        os.chdir(tmp_path)
        assert main(["dump-window", "--k", "3", "--out", "plain"]) == 0
    finally:
        os.chdir(cwd)
    assert (tmp_path / "plain" / "hamming_3x3.json").is_file()
