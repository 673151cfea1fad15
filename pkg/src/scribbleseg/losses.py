"""Partial cross-entropy on scribble pixels and the weighted total loss.

The total objective is

    total = pce + lambda1 * mpce + lambda2 * cc + lambda3 * en + lambda4 * con

where `pce` is cross-entropy restricted to annotated pixels, `mpce` the same
term on the masked-branch prediction, and the remaining terms come from the
consistency and pseudo-label modules.  Disabling a term is identical to
zeroing its weight.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, NumericalError
from .grids import ClassConfig

LOG_EPS = 1e-8
TERM_NAMES = ("pce", "mpce", "cc", "en", "con")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.1
    lambda3: float = 0.1
    lambda4: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass(frozen=True)
class LossReport:
    pce: float
    mpce: float
    cc: float
    en: float
    con: float
    total: float


def _pce_weights(scr_batch: np.ndarray, channels: int, include_bg: bool,
                 classes: ClassConfig) -> np.ndarray:
    """Per-pixel weights that turn a full cross-entropy sum into the mean
    over annotated pixels, batch-averaged."""
    b = scr_batch.shape[0]
    w = np.zeros((b, channels) + scr_batch.shape[1:])
    empty = False
    for i in range(b):
        scr = scr_batch[i]
        sel_fg = (scr >= 1) & (scr <= classes.num_foreground)
        bad = ~sel_fg & (scr != classes.unlabeled_code) & (scr != classes.gc_code) \
            & (scr != classes.bg_code)
        if bad.any():
            raise DataError(
                f"scribble code {int(scr[bad][0])} has no output channel"
            )
        labels = np.where(sel_fg, scr, 0).astype(np.int64)
        annotated = sel_fg.copy()
        if include_bg:
            annotated |= scr == classes.bg_code
        n = int(annotated.sum())
        if n == 0:
            empty = True
            continue
        rows, cols = np.nonzero(annotated)
        w[i, labels[rows, cols], rows, cols] = 1.0 / (n * b)
    if empty:
        warnings.warn("sample without annotated pixels contributes 0 to pce")
    return w


def loss_pce(y: Tensor, scr, include_bg: bool = False,
             classes: ClassConfig | None = None) -> Tensor:
    """Mean of -log(y[label]) over annotated pixels.

    Annotated means foreground scribble pixels, plus background scribble
    pixels when `include_bg`; GC contour pixels never count.
    """
    if classes is None:
        classes = ClassConfig()
    if not isinstance(y, Tensor):
        y = Tensor(np.asarray(y, dtype=np.float64))
    if y.ndim == 3:
        y = ad.reshape(y, (1,) + y.shape)
    scr_batch = np.asarray(scr)
    if scr_batch.ndim == 2:
        scr_batch = scr_batch[None]
    if scr_batch.shape[0] != y.shape[0] or scr_batch.shape[1:] != y.shape[2:]:
        raise DataError(
            f"scribble batch {scr_batch.shape} does not match prediction {y.shape}"
        )
    w = _pce_weights(scr_batch, y.shape[1], include_bg, classes)
    return -ad.tsum(Tensor(w) * ad.log(y + LOG_EPS))


def loss_ss(y: Tensor, y_m: Tensor, scr, lambda1: float = 0.5,
            include_bg: bool = False,
            classes: ClassConfig | None = None) -> Tensor:
    """Scribble supervision: pce on the clean prediction plus lambda1 times
    pce on the masked-branch prediction."""
    out = loss_pce(y, scr, include_bg, classes)
    if lambda1 != 0.0:
        out = out + lambda1 * loss_pce(y_m, scr, include_bg, classes)
    return out


def loss_total(terms: dict, weights: LossWeights | None = None,
               enabled=None):
    """Weighted sum of the enabled loss terms plus a numeric report.

    `terms` maps term name -> scalar Tensor; missing or disabled terms
    contribute 0.  `pce` must be enabled: it anchors every configuration.
    """
    if weights is None:
        weights = LossWeights()
    if enabled is None:
        enabled = set(terms)
    enabled = set(enabled)
    unknown = enabled - set(TERM_NAMES)
    if unknown:
        raise ConfigError(f"unknown loss terms: {sorted(unknown)}")
    if "pce" not in enabled:
        raise ConfigError("the pce term cannot be disabled")
    scale = {
        "pce": 1.0,
        "mpce": weights.lambda1,
        "cc": weights.lambda2,
        "en": weights.lambda3,
        "con": weights.lambda4,
    }
    values = {}
    total = None
    for name in TERM_NAMES:
        if name not in enabled or name not in terms:
            values[name] = 0.0
            continue
        term = terms[name]
        if not isinstance(term, Tensor) or term.data.size != 1:
            raise ValueError(f"term {name} must be a scalar tensor")
        if np.isnan(term.data).any():
            raise NumericalError(f"loss term {name} is NaN")
        values[name] = term.item()
        piece = term * scale[name]
        total = piece if total is None else total + piece
    report = LossReport(total=total.item(), **values)
    return total, report
