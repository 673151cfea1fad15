"""Training harness tests: config digests, dataset loading, the metrics
file, checkpoint artifacts, determinism, and the experiment grids."""

import json
import os
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from scribbleseg import __version__
from scribbleseg.errors import ConfigError, DataError
from scribbleseg.grids import ClassConfig
from scribbleseg.experiments import (ablate, decay_study, sensitivity,
                                     support_area_table)
from scribbleseg.mgrd import write_mgrd
from scribbleseg.nn import Adam, UNetConfig, build_unet, load_training_state
from scribbleseg.train import (TrainConfig, _prepare_train_samples,
                               config_hash, evaluate, load_manifest,
                               load_split, train)

FG_IDS = (1, 2, 3)


def _cfg(root, out, **kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("seed", 7)
    kw.setdefault("eval_interval", 2)
    return TrainConfig(data_dir=root, out_dir=str(out), **kw)


# -- config ----------------------------------------------------------------


def test_train_config_validation():
    def make(**kw):
        return TrainConfig(data_dir="d", out_dir="o", **kw)

    with pytest.raises(ConfigError):
        make(epochs=0)
    with pytest.raises(ConfigError):
        make(batch_size=0)
    with pytest.raises(ConfigError):
        make(eval_interval=0)
    with pytest.raises(ConfigError):
        make(enabled=("mpce", "cc"))
    with pytest.raises(ConfigError):
        make(gc_mask_source="bogus")
    with pytest.raises(ConfigError):
        make(shrink_ratio=1.5)
    with pytest.raises(ConfigError):
        make(train_fraction=0.0)
    make(enabled=("pce",), gc_mask_source="prediction_fg", shrink_ratio=1.0)


def test_config_hash_ignores_paths():
    a = TrainConfig(data_dir="/x", out_dir="/y", seed=3)
    b = TrainConfig(data_dir="/other", out_dir="/place", seed=3)
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 16
    assert set(config_hash(a)) <= set("0123456789abcdef")


def test_config_hash_tracks_science_fields():
    base = TrainConfig(data_dir="d", out_dir="o")
    assert config_hash(base) != config_hash(replace(base, seed=1))
    assert config_hash(base) != config_hash(replace(base, decay=0.2))
    assert config_hash(base) != config_hash(replace(base, enabled=("pce",)))


# -- data loading ----------------------------------------------------------


def test_load_manifest_ok(tiny_dataset):
    root, written = tiny_dataset
    doc = load_manifest(root)
    assert doc == written
    assert [len(doc[s]) for s in ("train", "val", "test")] == [6, 2, 2]


def test_load_manifest_errors(tmp_path):
    with pytest.raises(DataError, match="cannot read manifest"):
        load_manifest(str(tmp_path / "nope"))
    bad = tmp_path / "badjson"
    bad.mkdir()
    (bad / "manifest.json").write_text("{not json")
    with pytest.raises(DataError, match="not valid JSON"):
        load_manifest(str(bad))
    part = tmp_path / "partial"
    part.mkdir()
    (part / "manifest.json").write_text(json.dumps({"train": [], "test": []}))
    with pytest.raises(DataError, match="missing the val split"):
        load_manifest(str(part))


def test_load_split_ok(tiny_dataset):
    root, manifest = tiny_dataset
    samples = load_split(root, manifest, "val")
    assert len(samples) == 2
    for s in samples:
        assert s["image"].dtype == np.float64
        assert s["scribble"].dtype == np.uint8
        assert s["mask"].dtype == np.uint8
        assert s["image"].shape == (48, 48)


def test_load_split_errors(tmp_path):
    d = tmp_path / "ds"
    d.mkdir()
    write_mgrd(os.path.join(d, "i.mgrd"), np.zeros((16, 16), dtype=np.float32))
    write_mgrd(os.path.join(d, "s.mgrd"), np.zeros((16, 16), dtype=np.uint8))
    write_mgrd(os.path.join(d, "m.mgrd"), np.zeros((12, 16), dtype=np.uint8))
    entry = {"image": "i.mgrd", "scribble": "s.mgrd", "mask": "m.mgrd"}
    with pytest.raises(DataError, match="disagree in shape"):
        load_split(str(d), {"train": [entry]}, "train")
    with pytest.raises(DataError, match="missing 'mask'"):
        load_split(str(d), {"train": [{"image": "i.mgrd", "scribble": "s.mgrd"}]},
                   "train")


# -- evaluation ------------------------------------------------------------


class _FixedModel:
    """Forward ignores the input and returns one stored probability map."""

    def __init__(self, prob):
        self.prob = np.asarray(prob, dtype=np.float64)

    def eval(self):
        pass

    def forward(self, x):
        n = x.shape[0]
        return SimpleNamespace(data=np.repeat(self.prob[None], n, axis=0))


def _ref_dice(pred, gt, c):
    a = pred == c
    b = gt == c
    denom = int(a.sum()) + int(b.sum())
    return 1.0 if denom == 0 else 2.0 * int((a & b).sum()) / denom


def test_evaluate_matches_reference():
    pred = np.zeros((6, 6), dtype=np.uint8)
    pred[0:2, :] = 1
    pred[2:4, :] = 2
    prob = np.zeros((4, 6, 6))
    rows, cols = np.indices(pred.shape)
    prob[pred.astype(np.int64), rows, cols] = 1.0

    gt1 = np.zeros((6, 6), dtype=np.uint8)
    gt1[0:3, :] = 1
    gt1[4:6, 0:3] = 3
    gt2 = pred.copy()
    samples = [
        {"image": np.zeros((6, 6)), "mask": gt1},
        {"image": np.zeros((6, 6)), "mask": gt2},
    ]
    table = evaluate(_FixedModel(prob), samples, ClassConfig())
    want = [
        (_ref_dice(pred, gt1, c) + _ref_dice(pred, gt2, c)) / 2.0
        for c in FG_IDS
    ]
    assert table["per_class"] == pytest.approx(want, abs=1e-12)
    assert table["mean"] == pytest.approx(np.mean(want), abs=1e-12)
    assert table["count"] == 2
    again = evaluate(_FixedModel(prob), samples, ClassConfig(), batch_size=1)
    assert again == table


def test_evaluate_empty_split():
    with pytest.raises(DataError, match="empty split"):
        evaluate(_FixedModel(np.zeros((4, 6, 6))), [], ClassConfig())


# -- sample preparation ----------------------------------------------------


def test_prepare_samples_default(tiny_dataset):
    root, manifest = tiny_dataset
    cfg = _cfg(root, "unused")
    samples = load_split(root, manifest, "train")
    out = _prepare_train_samples(cfg, samples)
    assert len(out) == 6
    for s, orig in zip(out, samples):
        assert np.array_equal(s["scribble"], orig["scribble"])
        assert len(s["cpl"].foreground) == 3
        assert s["gc_mask"].shape == (48, 48)
        assert s["patch_grid"] is None


def test_prepare_samples_fraction(tiny_dataset):
    root, manifest = tiny_dataset
    samples = load_split(root, manifest, "train")
    half = _prepare_train_samples(_cfg(root, "u", train_fraction=0.5), samples)
    assert len(half) == 3
    tiny = _prepare_train_samples(_cfg(root, "u", train_fraction=0.1), samples)
    assert len(tiny) == 1


def test_prepare_samples_full_supervision(tiny_dataset):
    root, manifest = tiny_dataset
    samples = load_split(root, manifest, "train")
    out = _prepare_train_samples(_cfg(root, "u", full_supervision=True), samples)
    for s, orig in zip(out, samples):
        assert np.array_equal(s["scribble"], orig["mask"])


def test_prepare_samples_shrink(tiny_dataset):
    root, manifest = tiny_dataset
    samples = load_split(root, manifest, "train")
    out = _prepare_train_samples(_cfg(root, "u", shrink_ratio=0.5), samples)
    for s, orig in zip(out, samples):
        before = orig["scribble"]
        after = s["scribble"]
        for c in FG_IDS:  # the removal quota applies per class
            n_c = int((before == c).sum())
            removed = n_c - int((after == c).sum())
            assert removed == round(0.5 * n_c)
        changed = before != after
        assert np.isin(before[changed], FG_IDS).all()
        assert (after[changed] == 255).all()


# -- training loop ---------------------------------------------------------


def test_train_metrics_and_artifacts(tiny_dataset, tmp_path):
    root, _ = tiny_dataset
    cfg = _cfg(root, tmp_path / "run")
    model, summary = train(cfg)
    for name in ("metrics.csv", "best.mmdl", "final.mmdl", "final.mopt"):
        assert os.path.exists(tmp_path / "run" / name)

    lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    assert lines[0] == f"# config_hash: {config_hash(cfg)}"
    assert lines[1] == "# seed: 7"
    assert lines[2] == f"# version: {__version__}"
    assert lines[3].split(",") == [
        "epoch", "pce", "mpce", "cc", "en", "con", "total",
        "dice_rv", "dice_myo", "dice_lv", "dice_mean",
    ]
    assert len(lines) == 4 + cfg.epochs

    row1 = lines[4].split(",")
    assert row1[0] == "1"
    assert row1[7:] == [""] * 4  # off-interval epochs carry no dice cells
    row2 = lines[5].split(",")
    assert row2[0] == "2"
    vals = [float(c) for c in row2[1:]]
    pce, mpce, cc, en, con, total = vals[:6]
    assert total == pytest.approx(pce + 0.5 * mpce + 0.1 * (cc + en + con),
                                  abs=1e-9)
    assert all(0.0 <= d <= 1.0 for d in vals[6:])
    assert summary["best_epoch"] == 2
    assert summary["best_val_mean"] == float(row2.pop())

    opt = Adam(build_unet(UNetConfig(out_classes=4, seed=7)).parameters())
    head = load_training_state(str(tmp_path / "run" / "final.mopt"), opt)
    assert head["epoch"] == 2
    assert len(head["rng_state"]) == 4
    assert all(isinstance(w, int) for w in head["rng_state"])
    assert opt.step_count == cfg.epochs * 2  # 6 samples, batch 4 -> 2 steps


def test_train_pce_only_reports_zero_for_disabled(tiny_dataset, tmp_path):
    root, _ = tiny_dataset
    cfg = _cfg(root, tmp_path / "run", epochs=1, enabled=("pce",))
    train(cfg)
    lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    row = lines[4].split(",")
    pce, mpce, cc, en, con, total = (float(c) for c in row[1:7])
    assert pce > 0.0
    assert (mpce, cc, en, con) == (0.0, 0.0, 0.0, 0.0)
    assert total == pce


def test_train_repeat_runs_byte_identical(tiny_dataset, tmp_path):
    root, _ = tiny_dataset
    train(_cfg(root, tmp_path / "a"))
    train(_cfg(root, tmp_path / "b"))
    for name in ("metrics.csv", "best.mmdl", "final.mmdl", "final.mopt"):
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        assert a == b, f"{name} differs between identical runs"


def test_train_best_epoch_tracking(tiny_dataset, tmp_path):
    root, _ = tiny_dataset
    cfg = _cfg(root, tmp_path / "run", epochs=3, eval_interval=1)
    _, summary = train(cfg)
    lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    means = [float(line.split(",")[-1]) for line in lines[4:]]
    best_epoch, best_mean = 0, -1.0
    for i, v in enumerate(means, start=1):
        if v > best_mean:
            best_epoch, best_mean = i, v
    assert summary["best_epoch"] == best_epoch
    assert summary["best_val_mean"] == best_mean


def test_train_empty_split_rejected(tmp_path):
    d = tmp_path / "empty"
    d.mkdir()
    (d / "manifest.json").write_text(
        json.dumps({"train": [], "val": [], "test": []})
    )
    with pytest.raises(DataError, match="train split is empty"):
        train(_cfg(str(d), tmp_path / "out"))


def test_train_out_classes_mismatch(tiny_dataset, tmp_path):
    root, _ = tiny_dataset
    cfg = _cfg(root, tmp_path / "out", unet=UNetConfig(out_classes=3))
    with pytest.raises(ConfigError, match="does not match"):
        train(cfg)


# -- experiment grids ------------------------------------------------------


def test_ablate_rows_and_csv(tiny_dataset, tmp_path):
    root, _ = tiny_dataset
    cfg = _cfg(root, tmp_path / "ab", epochs=1, eval_interval=1)
    rows = ablate(cfg, subsets=(("pce",), ("pce", "cc")))
    assert [r["losses"] for r in rows] == ["pce", "pce+cc"]
    for sub in ("ablate_pce", "ablate_pce_cc"):
        assert os.path.exists(tmp_path / "ab" / sub / "metrics.csv")
        assert os.path.exists(tmp_path / "ab" / sub / "final.mmdl")
    lines = (tmp_path / "ab" / "ablation.csv").read_text().splitlines()
    assert lines[0] == f"# config_hash: {config_hash(cfg)}"
    assert lines[3] == "losses,dice_rv,dice_myo,dice_lv,dice_mean"
    assert len(lines) == 6
    for line, row in zip(lines[4:], rows):
        cells = line.split(",")
        assert cells[0] == row["losses"]
        assert float(cells[-1]) == row["dice"]["mean"]


def test_ablate_requires_pce():
    cfg = TrainConfig(data_dir="d", out_dir="o")
    with pytest.raises(ConfigError, match="missing pce"):
        ablate(cfg, subsets=(("cc", "en"),))


def test_sensitivity_rows_and_csv(tiny_dataset, tmp_path):
    root, _ = tiny_dataset
    cfg = _cfg(root, tmp_path / "se", epochs=1, eval_interval=1)
    rows = sensitivity(cfg, ratios=(0.0,), fractions=(0.5,))
    assert [(r["kind"], r["value"]) for r in rows] == [
        ("shrink", 0.0), ("samples", 0.5),
    ]
    assert os.path.exists(tmp_path / "se" / "shrink_000" / "metrics.csv")
    assert os.path.exists(tmp_path / "se" / "samples_050" / "metrics.csv")
    lines = (tmp_path / "se" / "sensitivity.csv").read_text().splitlines()
    assert lines[3] == "kind,value,dice_rv,dice_myo,dice_lv,dice_mean"
    assert len(lines) == 6
    assert lines[4].startswith("shrink,0.0,")
    assert lines[5].startswith("samples,0.5,")


def test_sensitivity_validates_grid():
    cfg = TrainConfig(data_dir="d", out_dir="o")
    with pytest.raises(ConfigError, match="shrink ratio"):
        sensitivity(cfg, ratios=(1.5,), fractions=(1.0,))
    with pytest.raises(ConfigError, match="sample fraction"):
        sensitivity(cfg, ratios=(0.0,), fractions=(0.0,))


def test_support_area_table(tiny_dataset):
    root, _ = tiny_dataset
    table = support_area_table(root, decays=(0.05, 0.2))
    assert [row["index"] for row in table] == list(range(6))
    for row in table:
        # Slower decay keeps more pixels above the floor cutoff.
        assert row[0.05] > row[0.2] > 0


def test_support_area_table_empty_split(tmp_path):
    d = tmp_path / "empty"
    d.mkdir()
    (d / "manifest.json").write_text(
        json.dumps({"train": [], "val": [], "test": []})
    )
    with pytest.raises(DataError, match="is empty"):
        support_area_table(str(d))


def test_decay_study_rows_and_csvs(tiny_dataset, tmp_path):
    root, _ = tiny_dataset
    cfg = _cfg(root, tmp_path / "de", epochs=1, eval_interval=1)
    rows = decay_study(cfg, decays=(0.1, 0.5))
    assert [r["decay"] for r in rows] == [0.1, 0.5]
    assert rows[0]["config_hash"] != rows[1]["config_hash"]
    for row in rows:
        assert row["config_hash"] == config_hash(replace(cfg, decay=row["decay"]))

    sup = (tmp_path / "de" / "decay_support.csv").read_text().splitlines()
    assert sup[3] == "index,support_0.1,support_0.5"
    assert len(sup) == 4 + 6
    for line in sup[4:]:
        _, a, b = line.split(",")
        assert int(a) > int(b) > 0

    study = (tmp_path / "de" / "decay_study.csv").read_text().splitlines()
    assert study[3] == "decay,dice_rv,dice_myo,dice_lv,dice_mean,config_hash"
    assert [line.split(",")[-1] for line in study[4:]] == \
        [r["config_hash"] for r in rows]


def test_decay_study_validates_decays():
    cfg = TrainConfig(data_dir="d", out_dir="o")
    with pytest.raises(ConfigError, match="must be positive"):
        decay_study(cfg, decays=(0.0,))
