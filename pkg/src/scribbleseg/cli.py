"""Command-line entry points.

Subcommands cover dataset generation, pseudo-label and mask construction,
training, evaluation, the experiment grids, scribble shrinking, and
visualization.  Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import __version__
from .cpl import build_cpl
from .errors import ConfigError, DataError, NumericalError
from .experiments import (DEFAULT_DECAYS, DEFAULT_SAMPLE_FRACTIONS,
                          DEFAULT_SHRINK_RATIOS, ablate, decay_study,
                          sensitivity)
from .grids import ClassConfig
from .losses import LossWeights
from .mcm import MCMConfig, apply_mask, patch_weights, sample_mask
from .mgrd import read_mgrd, write_mgrd
from .nn import UNetConfig, load_model
from .phantom import (PhantomParams, ScribbleSynthParams, synthesize_scribbles,
                      write_dataset)
from .rng import STREAM_TRAIN, Xoshiro256StarStar, derive_seed
from .scribbles import shrink_scribble
from .train import TrainConfig, evaluate, load_manifest, load_split, train
from .viz import render_overlay, render_patch_mask, write_pgm


def _nested(doc: dict, key, cls):
    sub = doc.pop(key, None)
    if sub is None:
        return None
    if not isinstance(sub, dict):
        raise ConfigError(f"config key {key!r} must be an object")
    try:
        return cls(**sub)
    except TypeError as e:
        raise ConfigError(f"bad {key} config: {e}") from e


def config_from_dict(doc: dict) -> TrainConfig:
    """Build a TrainConfig from a plain JSON-style dict; every key has a
    dataclass default, unknown keys are rejected."""
    doc = dict(doc)
    kwargs = {}
    for key, cls in (("mcm", MCMConfig), ("weights", LossWeights),
                     ("classes", ClassConfig), ("unet", UNetConfig)):
        value = _nested(doc, key, cls)
        if value is not None:
            kwargs[key] = value
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("enabled",):
        if key in doc and isinstance(doc[key], list):
            doc[key] = tuple(doc[key])
    kwargs.update(doc)
    try:
        return TrainConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad config: {e}") from e


def _load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e


def _train_config(args) -> TrainConfig:
    doc = _load_config_file(args.config) if args.config else {}
    doc["data_dir"] = args.data
    doc["out_dir"] = args.out
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.epochs is not None:
        doc["epochs"] = args.epochs
    return config_from_dict(doc)


def _parse_floats(text: str) -> tuple:
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError as e:
        raise ConfigError(f"bad number list {text!r}: {e}") from e


def _add_train_args(sub):
    sub.add_argument("--data", required=True, help="dataset directory")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--epochs", type=int, default=None)


def _cmd_gen_data(args) -> int:
    pp = PhantomParams(image_size=args.size, noise_sigma=args.noise)
    sp = ScribbleSynthParams(walk_length_factor=args.alpha)
    split = _parse_floats(args.split)
    write_dataset(args.out, args.count, pp, sp, split, args.seed)
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def _cmd_gen_scribbles(args) -> int:
    mask = read_mgrd(args.mask)
    params = ScribbleSynthParams(
        walk_length_factor=args.alpha, erosion_margin=args.erosion,
        gc_margin=args.gc_margin, include_background=not args.no_background,
        seed=args.seed,
    )
    scr = synthesize_scribbles(mask, params)
    write_mgrd(args.out, scr)
    print(f"wrote scribbles to {args.out}")
    return 0


def _cmd_make_cpl(args) -> int:
    manifest = load_manifest(args.data)
    out_dir = args.out or os.path.join(args.data, "cpl")
    os.makedirs(out_dir, exist_ok=True)
    classes = ClassConfig()
    count = 0
    for split in ("train", "val", "test"):
        for entry in manifest[split]:
            scr = read_mgrd(os.path.join(args.data, entry["scribble"]))
            stack = build_cpl(scr, args.decay, args.floor, classes)
            stem = os.path.splitext(entry["scribble"])[0]
            for ch in stack.foreground:
                write_mgrd(
                    os.path.join(out_dir, f"{stem}_cpl_c{ch.class_code}.mgrd"),
                    ch.values.astype(np.float32),
                )
            write_mgrd(
                os.path.join(out_dir, f"{stem}_cpl_gc.mgrd"),
                stack.gc.values.astype(np.float32),
            )
            count += 1
    print(f"wrote pseudo labels for {count} samples to {out_dir}")
    return 0


def _cmd_make_mask(args) -> int:
    img = read_mgrd(args.image).astype(np.float64)
    scr = read_mgrd(args.scribble)
    cfg = MCMConfig(scribble_weight=args.ws, other_weight=args.wo,
                    mask_ratio=args.phi, patch_size=args.patch)
    pg = patch_weights(scr, cfg)
    rng = Xoshiro256StarStar(derive_seed(args.seed, STREAM_TRAIN))
    pm = sample_mask(pg, cfg.mask_ratio, rng)
    masked = apply_mask(img, pm)
    write_mgrd(args.out, masked.astype(np.float32))
    stem = os.path.splitext(args.out)[0]
    write_mgrd(f"{stem}_patches.mgrd", pm.masked.astype(np.uint8))
    print(f"masked {pm.masked_count} of {pg.rows * pg.cols} patches")
    return 0


def _cmd_train(args) -> int:
    cfg = _train_config(args)
    _, summary = train(cfg)
    print(f"best val mean dice {summary['best_val_mean']:.4f} "
          f"at epoch {summary['best_epoch']}")
    return 0


def _cmd_eval(args) -> int:
    model = load_model(args.model)
    manifest = load_manifest(args.data)
    samples = load_split(args.data, manifest, args.split)
    classes = ClassConfig()
    table = evaluate(model, samples, classes)
    for name, value in zip(classes.foreground_classes, table["per_class"]):
        print(f"dice_{name}: {value:.4f}")
    print(f"dice_mean: {table['mean']:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _train_config(args)
    rows = ablate(cfg)
    for row in rows:
        print(f"{row['losses']}: mean dice {row['dice']['mean']:.4f}")
    return 0


def _cmd_sensitivity(args) -> int:
    cfg = _train_config(args)
    ratios = _parse_floats(args.ratios) if args.ratios else DEFAULT_SHRINK_RATIOS
    fracs = _parse_floats(args.fractions) if args.fractions \
        else DEFAULT_SAMPLE_FRACTIONS
    rows = sensitivity(cfg, ratios, fracs)
    for row in rows:
        print(f"{row['kind']} {row['value']}: mean dice {row['dice']['mean']:.4f}")
    return 0


def _cmd_decay_study(args) -> int:
    cfg = _train_config(args)
    decays = _parse_floats(args.decays) if args.decays else DEFAULT_DECAYS
    rows = decay_study(cfg, decays)
    for row in rows:
        print(f"decay {row['decay']}: mean dice {row['dice']['mean']:.4f}")
    return 0


def _cmd_shrink(args) -> int:
    scr = read_mgrd(args.scribble)
    out = shrink_scribble(scr, args.ratio)
    write_mgrd(args.out, out)
    removed = int((scr != out).sum())
    print(f"removed {removed} scribble pixels at ratio {args.ratio}")
    return 0


def _cmd_viz(args) -> int:
    img = read_mgrd(args.image).astype(np.float64)
    if args.layer is None:
        write_pgm(args.out, img)
        return 0
    layer = read_mgrd(args.layer)
    if args.kind == "cpl":
        write_pgm(args.out, layer.astype(np.float64))
    elif args.kind == "patches":
        render_patch_mask(layer, args.patch, args.out)
    else:
        render_overlay(img, layer, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="scribbleseg",
        description="Scribble-supervised segmentation with masked context "
                    "and continuous pseudo labels.",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="0.7,0.15,0.15")
    s.add_argument("--alpha", type=float, default=1.0,
                   help="scribble length factor")
    s.add_argument("--noise", type=float, default=0.08)
    s.set_defaults(func=_cmd_gen_data)

    s = sub.add_parser("gen-scribbles", help="scribbles for one dense mask")
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--erosion", type=int, default=2)
    s.add_argument("--gc-margin", type=int, default=4)
    s.add_argument("--no-background", action="store_true")
    s.set_defaults(func=_cmd_gen_scribbles)

    s = sub.add_parser("make-cpl", help="write continuous pseudo labels")
    s.add_argument("--data", required=True)
    s.add_argument("--decay", type=float, default=0.1)
    s.add_argument("--floor", type=float, default=0.05)
    s.add_argument("--out")
    s.set_defaults(func=_cmd_make_cpl)

    s = sub.add_parser("make-mask", help="attention-masked image for one sample")
    s.add_argument("--image", required=True)
    s.add_argument("--scribble", required=True)
    s.add_argument("--ws", type=float, default=2.0)
    s.add_argument("--wo", type=float, default=1.0)
    s.add_argument("--phi", type=float, default=0.5)
    s.add_argument("--patch", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_make_mask)

    s = sub.add_parser("train", help="train a model")
    _add_train_args(s)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("eval", help="evaluate a saved model")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("ablate", help="loss-subset ablation grid")
    _add_train_args(s)
    s.set_defaults(func=_cmd_ablate)

    s = sub.add_parser("sensitivity", help="shrink-ratio and sample-count grid")
    _add_train_args(s)
    s.add_argument("--ratios", help="comma list, default 0,0.1,...,0.5")
    s.add_argument("--fractions", help="comma list, default 0.25,0.5,1.0")
    s.set_defaults(func=_cmd_sensitivity)

    s = sub.add_parser("decay-study", help="pseudo-label decay grid")
    _add_train_args(s)
    s.add_argument("--decays", help="comma list, default 0.05,0.1,0.2,0.5")
    s.set_defaults(func=_cmd_decay_study)

    s = sub.add_parser("shrink", help="shrink a scribble annotation")
    s.add_argument("--scribble", required=True)
    s.add_argument("--ratio", type=float, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_shrink)

    s = sub.add_parser("viz", help="render PGM/PPM visualizations")
    s.add_argument("--image", required=True)
    s.add_argument("--layer")
    s.add_argument("--kind", default="mask",
                   choices=("mask", "scribble", "cpl", "patches"))
    s.add_argument("--patch", type=int, default=16)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
