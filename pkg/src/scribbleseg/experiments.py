"""Experiment grids: loss ablation, shrink/sample sensitivity, decay study.

Each grid trains one model per setting with a shared seed and dataset, then
evaluates on the test split and writes a CSV with a provenance header.
"""

from __future__ import annotations

import os
from dataclasses import replace

import numpy as np

from . import __version__
from .cpl import build_cpl
from .errors import ConfigError, DataError
from .grids import ClassConfig
from .train import TrainConfig, config_hash, evaluate, load_manifest, load_split, train

# Loss subsets in presentation order; the first row is the baseline and the
# last enables everything.
DEFAULT_ABLATION = (
    ("pce",),
    ("pce", "cc"),
    ("pce", "cc", "mpce"),
    ("pce", "cc", "mpce", "en"),
    ("pce", "con"),
    ("pce", "mpce", "cc", "en", "con"),
)

DEFAULT_SHRINK_RATIOS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
DEFAULT_SAMPLE_FRACTIONS = (0.25, 0.5, 1.0)
DEFAULT_DECAYS = (0.05, 0.1, 0.2, 0.5)


def _format(x) -> str:
    return repr(float(x))


def _open_csv(path, cfg: TrainConfig, columns):
    fh = open(path, "w")
    fh.write(f"# config_hash: {config_hash(cfg)}\n")
    fh.write(f"# seed: {cfg.seed}\n")
    fh.write(f"# version: {__version__}\n")
    fh.write(",".join(columns) + "\n")
    return fh


def _dice_columns(cfg: TrainConfig):
    return [f"dice_{n}" for n in cfg.classes.foreground_classes] + ["dice_mean"]


def _run_and_test(cfg: TrainConfig):
    model, summary = train(cfg)
    manifest = load_manifest(cfg.data_dir)
    test = load_split(cfg.data_dir, manifest, "test")
    dice = evaluate(model, test, cfg.classes)
    return dice, summary


def ablate(cfg: TrainConfig, subsets=DEFAULT_ABLATION) -> list[dict]:
    """One training run per loss subset; returns rows and writes
    ablation.csv under cfg.out_dir."""
    for subset in subsets:
        if "pce" not in subset:
            raise ConfigError(f"ablation subset {subset} is missing pce")
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    for subset in subsets:
        name = "+".join(subset)
        run_cfg = replace(
            cfg, enabled=tuple(subset),
            out_dir=os.path.join(cfg.out_dir, f"ablate_{name.replace('+', '_')}"),
        )
        dice, _ = _run_and_test(run_cfg)
        rows.append({"losses": name, "dice": dice})
    path = os.path.join(cfg.out_dir, "ablation.csv")
    fh = _open_csv(path, cfg, ["losses"] + _dice_columns(cfg))
    for row in rows:
        cells = [row["losses"]]
        cells += [_format(v) for v in row["dice"]["per_class"]]
        cells.append(_format(row["dice"]["mean"]))
        fh.write(",".join(cells) + "\n")
    fh.close()
    return rows


def sensitivity(cfg: TrainConfig, ratios=DEFAULT_SHRINK_RATIOS,
                fractions=DEFAULT_SAMPLE_FRACTIONS) -> list[dict]:
    """Shrink-ratio sweep plus training-set-size sweep; writes
    sensitivity.csv under cfg.out_dir."""
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"shrink ratio {r} outside [0, 1]")
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ConfigError(f"sample fraction {f} outside (0, 1]")
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    for r in ratios:
        run_cfg = replace(
            cfg, shrink_ratio=r,
            out_dir=os.path.join(cfg.out_dir, f"shrink_{int(round(100 * r)):03d}"),
        )
        dice, _ = _run_and_test(run_cfg)
        rows.append({"kind": "shrink", "value": r, "dice": dice})
    for f in fractions:
        run_cfg = replace(
            cfg, train_fraction=f,
            out_dir=os.path.join(cfg.out_dir, f"samples_{int(round(100 * f)):03d}"),
        )
        dice, _ = _run_and_test(run_cfg)
        rows.append({"kind": "samples", "value": f, "dice": dice})
    path = os.path.join(cfg.out_dir, "sensitivity.csv")
    fh = _open_csv(path, cfg, ["kind", "value"] + _dice_columns(cfg))
    for row in rows:
        cells = [row["kind"], _format(row["value"])]
        cells += [_format(v) for v in row["dice"]["per_class"]]
        cells.append(_format(row["dice"]["mean"]))
        fh.write(",".join(cells) + "\n")
    fh.close()
    return rows


def support_area_table(data_dir, decays=DEFAULT_DECAYS, floor=0.05,
                       classes=None, split="train"):
    """Foreground pseudo-label support (nonzero pixels) per sample per decay."""
    if classes is None:
        classes = ClassConfig()
    manifest = load_manifest(data_dir)
    samples = load_split(data_dir, manifest, split)
    if not samples:
        raise DataError(f"split {split} is empty")
    table = []
    for i, s in enumerate(samples):
        row = {"index": i}
        for k in decays:
            stack = build_cpl(s["scribble"], k, floor, classes)
            row[k] = int(np.sum(stack.support_areas()))
        table.append(row)
    return table


def decay_study(cfg: TrainConfig, decays=DEFAULT_DECAYS) -> list[dict]:
    """One training run per decay factor; also records pseudo-label support
    areas.  Writes decay_study.csv and decay_support.csv under cfg.out_dir."""
    for k in decays:
        if k <= 0:
            raise ConfigError(f"decay {k} must be positive")
    os.makedirs(cfg.out_dir, exist_ok=True)
    support = support_area_table(cfg.data_dir, decays, cfg.floor, cfg.classes)
    spath = os.path.join(cfg.out_dir, "decay_support.csv")
    fh = _open_csv(cfg=cfg, path=spath,
                   columns=["index"] + [f"support_{k}" for k in decays])
    for row in support:
        fh.write(",".join([str(row["index"])] + [str(row[k]) for k in decays]) + "\n")
    fh.close()
    rows = []
    for k in decays:
        run_cfg = replace(
            cfg, decay=k,
            out_dir=os.path.join(cfg.out_dir, f"decay_{_format(k)}"),
        )
        dice, _ = _run_and_test(run_cfg)
        rows.append({"decay": k, "dice": dice, "config_hash": config_hash(run_cfg)})
    path = os.path.join(cfg.out_dir, "decay_study.csv")
    fh = _open_csv(path, cfg, ["decay"] + _dice_columns(cfg) + ["config_hash"])
    for row in rows:
        cells = [_format(row["decay"])]
        cells += [_format(v) for v in row["dice"]["per_class"]]
        cells.append(_format(row["dice"]["mean"]))
        cells.append(row["config_hash"])
        fh.write(",".join(cells) + "\n")
    fh.close()
    return rows
