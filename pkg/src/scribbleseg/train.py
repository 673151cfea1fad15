"""Training loop, evaluation, metrics logging, and checkpointing.

Every run is a pure function of (config, seed): batches, masks, and
initialization all come from seed-derived streams, losses are accumulated
in a fixed order, and floats are written with `repr`, so repeated runs
produce byte-identical metrics files and checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .autodiff import Tensor
from .cpl import build_cpl, loss_con
from .errors import ConfigError, DataError, NumericalError
from .grids import ClassConfig, argmax_classes, dice_score
from .losses import LossWeights, loss_pce, loss_total
from .mcm import (MCMConfig, apply_mask, enhance, gc_binary_mask, loss_cc,
                  loss_en, patch_weights, sample_mask)
from .mgrd import read_mgrd
from .nn import (Adam, UNet, UNetConfig, backward_and_step, build_unet,
                 save_model, save_training_state)
from .rng import STREAM_TRAIN, Xoshiro256StarStar, derive_seed
from .scribbles import shrink_scribble

METRICS_NAME = "metrics.csv"
BEST_MODEL_NAME = "best.mmdl"
FINAL_MODEL_NAME = "final.mmdl"
FINAL_OPT_NAME = "final.mopt"


@dataclass(frozen=True)
class TrainConfig:
    data_dir: str
    out_dir: str
    epochs: int = 200
    batch_size: int = 4
    learning_rate: float = 1e-4
    seed: int = 0
    eval_interval: int = 5
    enabled: tuple = ("pce", "mpce", "cc", "en", "con")
    include_bg: bool = False
    decay: float = 0.1
    floor: float = 0.05
    gc_in_con: bool = True
    con_form: str = "entropy_weighted"
    gc_mask_source: str = "annotation"
    fixed_mask: bool = False
    shrink_ratio: float = 0.0
    train_fraction: float = 1.0
    full_supervision: bool = False
    mcm: MCMConfig = field(default_factory=MCMConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    classes: ClassConfig = field(default_factory=ClassConfig)
    unet: UNetConfig | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_interval < 1:
            raise ConfigError(f"eval_interval must be >= 1, got {self.eval_interval}")
        if "pce" not in self.enabled:
            raise ConfigError("the pce loss cannot be disabled")
        if self.gc_mask_source not in ("annotation", "prediction_fg"):
            raise ConfigError(f"unknown gc_mask_source {self.gc_mask_source!r}")
        if not 0.0 <= self.shrink_ratio <= 1.0:
            raise ConfigError(f"shrink_ratio must be in [0, 1], got {self.shrink_ratio}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError(
                f"train_fraction must be in (0, 1], got {self.train_fraction}"
            )


def config_hash(cfg: TrainConfig) -> str:
    """Stable digest of the science-relevant config (paths excluded)."""
    doc = asdict(cfg)
    doc.pop("data_dir")
    doc.pop("out_dir")
    blob = json.dumps(doc, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def load_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.json")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}") from e
    for split in ("train", "val", "test"):
        if split not in doc or not isinstance(doc[split], list):
            raise DataError(f"manifest {path} is missing the {split} split")
    return doc


def load_split(data_dir, manifest: dict, split: str) -> list[dict]:
    """Load one split into memory as {image, scribble, mask} arrays."""
    out = []
    for entry in manifest[split]:
        sample = {}
        for key in ("image", "scribble", "mask"):
            if key not in entry:
                raise DataError(f"manifest entry missing {key!r} in split {split}")
            arr = read_mgrd(os.path.join(data_dir, entry[key]))
            sample[key] = arr.astype(np.float64) if key == "image" else arr
        if sample["scribble"].shape != sample["image"].shape \
                or sample["mask"].shape != sample["image"].shape:
            raise DataError(f"sample grids disagree in shape in split {split}")
        out.append(sample)
    return out


def _format(x) -> str:
    return repr(float(x))


class _MetricsWriter:
    def __init__(self, path, cfg: TrainConfig, class_names):
        self.path = path
        self.fh = open(path, "w")
        self.fh.write(f"# config_hash: {config_hash(cfg)}\n")
        self.fh.write(f"# seed: {cfg.seed}\n")
        self.fh.write(f"# version: {__version__}\n")
        cols = ["epoch", "pce", "mpce", "cc", "en", "con", "total"]
        cols += [f"dice_{n}" for n in class_names] + ["dice_mean"]
        self.fh.write(",".join(cols) + "\n")

    def row(self, epoch, means, dice=None, n_classes=0):
        cells = [str(epoch)]
        cells += [_format(means[k]) for k in ("pce", "mpce", "cc", "en", "con", "total")]
        if dice is None:
            cells += [""] * (n_classes + 1)
        else:
            cells += [_format(d) for d in dice["per_class"]]
            cells.append(_format(dice["mean"]))
        self.fh.write(",".join(cells) + "\n")

    def close(self):
        self.fh.close()


def evaluate(model: UNet, samples: list[dict], classes: ClassConfig | None = None,
             batch_size: int = 8) -> dict:
    """Per-class Dice of argmax predictions against dense masks."""
    if classes is None:
        classes = ClassConfig()
    if not samples:
        raise DataError("cannot evaluate an empty split")
    model.eval()
    k = classes.num_foreground
    sums = np.zeros(k)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        x = np.stack([s["image"] for s in chunk])[:, None]
        y = model.forward(x).data
        for j, s in enumerate(chunk):
            pred = argmax_classes(y[j])
            for c in range(1, k + 1):
                sums[c - 1] += dice_score(pred, s["mask"], c)
    per_class = sums / len(samples)
    return {
        "per_class": [float(v) for v in per_class],
        "mean": float(per_class.mean()),
        "count": len(samples),
    }


def _prepare_train_samples(cfg: TrainConfig, samples: list[dict]) -> list[dict]:
    if cfg.train_fraction < 1.0:
        keep = max(1, round(cfg.train_fraction * len(samples)))
        samples = samples[:keep]
    out = []
    for s in samples:
        scr = s["scribble"]
        if cfg.shrink_ratio > 0.0:
            scr = shrink_scribble(scr, cfg.shrink_ratio, cfg.classes)
        if cfg.full_supervision:
            # Dense supervision baseline: every pixel is annotated.
            scr = s["mask"].copy()
        stack = build_cpl(scr, cfg.decay, cfg.floor, cfg.classes)
        out.append({
            "image": s["image"],
            "scribble": scr,
            "mask": s["mask"],
            "cpl": stack,
            "gc_mask": gc_binary_mask(stack.gc),
            "patch_grid": None,
        })
    return out


def train(cfg: TrainConfig):
    """Run the full training loop; returns (model, summary dict).

    Artifacts in cfg.out_dir: metrics.csv (per-epoch loss means and periodic
    validation Dice), best.mmdl (best validation mean Dice), final.mmdl and
    final.mopt (last state, resumable).
    """
    manifest = load_manifest(cfg.data_dir)
    train_samples = _prepare_train_samples(
        cfg, load_split(cfg.data_dir, manifest, "train")
    )
    val_samples = load_split(cfg.data_dir, manifest, "val")
    if not train_samples:
        raise DataError("train split is empty")
    if not val_samples:
        raise DataError("val split is empty")

    classes = cfg.classes
    ucfg = cfg.unet or UNetConfig(out_classes=classes.out_channels, seed=cfg.seed)
    if ucfg.out_classes != classes.out_channels:
        raise ConfigError(
            f"unet out_classes {ucfg.out_classes} does not match "
            f"{classes.out_channels} label channels"
        )
    model = build_unet(ucfg)
    opt = Adam(model.parameters(), cfg.learning_rate)
    rng = Xoshiro256StarStar(derive_seed(cfg.seed, STREAM_TRAIN))
    include_bg = cfg.include_bg or cfg.full_supervision

    need_masked = bool({"mpce", "cc"} & set(cfg.enabled))
    need_enhanced = bool({"cc", "en"} & set(cfg.enabled))

    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output dir {cfg.out_dir}: {e}") from e
    writer = _MetricsWriter(
        os.path.join(cfg.out_dir, METRICS_NAME), cfg, classes.foreground_classes
    )
    best = {"mean": -1.0, "epoch": 0}
    order = list(range(len(train_samples)))
    term_keys = ("pce", "mpce", "cc", "en", "con", "total")
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            rng.shuffle(order)
            sums = dict.fromkeys(term_keys, 0.0)
            steps = 0
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_samples[i] for i in order[start : start + cfg.batch_size]]
                report = _train_step(
                    cfg, model, opt, rng, batch, include_bg, need_masked,
                    need_enhanced,
                )
                for key in term_keys:
                    sums[key] += getattr(report, key)
                steps += 1
            means = {k: sums[k] / steps for k in term_keys}
            dice = None
            if epoch % cfg.eval_interval == 0 or epoch == cfg.epochs:
                dice = evaluate(model, val_samples, classes)
                if dice["mean"] > best["mean"]:
                    best = {"mean": dice["mean"], "epoch": epoch}
                    save_model(model, os.path.join(cfg.out_dir, BEST_MODEL_NAME))
            writer.row(epoch, means, dice, classes.num_foreground)
    finally:
        writer.close()
    save_model(model, os.path.join(cfg.out_dir, FINAL_MODEL_NAME))
    # The train stream only draws integers, so its spare-normal slot is
    # always empty and the four state words reload it exactly.
    save_training_state(
        os.path.join(cfg.out_dir, FINAL_OPT_NAME), opt,
        {"epoch": cfg.epochs, "rng_state": list(rng.get_state()[0])},
    )
    return model, {"best_val_mean": best["mean"], "best_epoch": best["epoch"]}


def _train_step(cfg, model, opt, rng, batch, include_bg, need_masked, need_enhanced):
    imgs = np.stack([s["image"] for s in batch])
    scrs = np.stack([s["scribble"] for s in batch])
    x = Tensor(imgs[:, None])

    if need_masked:
        masked = []
        for s in batch:
            if s["patch_grid"] is None:
                s["patch_grid"] = patch_weights(s["scribble"], cfg.mcm, cfg.classes)
            if cfg.fixed_mask and "fixed_pm" in s:
                pm = s["fixed_pm"]
            else:
                pm = sample_mask(s["patch_grid"], cfg.mcm.mask_ratio, rng)
                if cfg.fixed_mask:
                    s["fixed_pm"] = pm
            masked.append(apply_mask(s["image"], pm))
        x_m = Tensor(np.stack(masked)[:, None])

    y = model.forward(x)
    y_m = model.forward(x_m) if need_masked else None

    terms = {}
    enabled = set(cfg.enabled)
    if "pce" in enabled:
        terms["pce"] = loss_pce(y, scrs, include_bg, cfg.classes)
    if "mpce" in enabled:
        terms["mpce"] = loss_pce(y_m, scrs, include_bg, cfg.classes)
    if need_enhanced:
        if cfg.gc_mask_source == "annotation":
            gmask = np.stack([s["gc_mask"] for s in batch])[:, None]
        else:
            gmask = (1.0 - y.data[:, :1] >= 0.5).astype(np.float64)
        y_e = enhance(y, gmask)
        if "cc" in enabled:
            terms["cc"] = loss_cc(y_m, y_e)
        if "en" in enabled:
            terms["en"] = loss_en(y, y_e)
    if "con" in enabled:
        terms["con"] = loss_con(
            [s["cpl"] for s in batch], y, cfg.gc_in_con, cfg.con_form
        )
    try:
        total, report = loss_total(terms, cfg.weights, enabled)
    except NumericalError as e:
        raise NumericalError(f"step {opt.step_count + 1}: {e}") from e
    backward_and_step(model, total, opt)
    return report
