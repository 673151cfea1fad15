"""Compact UNet, Adam optimizer, and checkpoint serialization.

The network is an encoder-decoder with skip connections: `depth` resolution
levels, 2x max pooling between levels on the way down and nearest-neighbor
2x upsampling plus channel concatenation on the way up, a 1x1 projection
head, and a channel softmax.  Channel widths double per level starting at
`base_channels`.

Every layer is composed from the primitives in `autodiff`, so one
`backward()` call on a scalar loss yields gradients for all parameters.
Parameter values are quantized to float32-representable numbers after each
optimizer step; checkpoints store float32 payloads, so a save/load
round-trip is bitwise exact and resumed training matches continuous
training.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, NumericalError
from .rng import STREAM_INIT, Xoshiro256StarStar, derive_seed

MODEL_MAGIC = b"MMDL"
MODEL_VERSION = 0x01
OPT_MAGIC = b"MOPT"
OPT_VERSION = 0x01

GROUP_NORM_GROUPS = 4
NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.1


@dataclass(frozen=True)
class UNetConfig:
    out_classes: int
    in_channels: int = 1
    depth: int = 3
    base_channels: int = 8
    norm: str = "group"
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 4:
            raise ConfigError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.norm not in ("group", "batch"):
            raise ConfigError(f"norm must be 'group' or 'batch', got {self.norm!r}")
        if self.norm == "group" and self.base_channels % GROUP_NORM_GROUPS:
            raise ConfigError(
                f"base_channels must be divisible by {GROUP_NORM_GROUPS} "
                f"for group norm, got {self.base_channels}"
            )
        if self.out_classes < 2:
            raise ConfigError(f"out_classes must be >= 2, got {self.out_classes}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit value, got {self.seed}")


def _quantize_f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


class _Conv2d:
    def __init__(self, name, cin, cout, k, pad, rng: Xoshiro256StarStar):
        self.name = name
        self.pad = pad
        limit = np.sqrt(6.0 / (cin * k * k))
        w = rng.uniforms((cout, cin, k, k), -limit, limit)
        self.weight = Tensor(_quantize_f32(w), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.pad)

    def parameters(self):
        return [self.weight, self.bias]


class _GroupNorm:
    def __init__(self, name, channels):
        self.name = name
        self.channels = channels
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        b, c, h, w = x.shape
        g = GROUP_NORM_GROUPS
        xr = ad.reshape(x, (b, g, c // g, h, w))
        mu = ad.tmean(xr, axis=(2, 3, 4), keepdims=True)
        d = xr - mu
        var = ad.tmean(d * d, axis=(2, 3, 4), keepdims=True)
        xn = d / ad.sqrt(var + NORM_EPS)
        xn = ad.reshape(xn, (b, c, h, w))
        sc = ad.reshape(self.scale, (1, c, 1, 1))
        sh = ad.reshape(self.shift, (1, c, 1, 1))
        return xn * sc + sh

    def parameters(self):
        return [self.scale, self.shift]

    def buffers(self):
        return []


class _BatchNorm2d:
    def __init__(self, name, channels):
        self.name = name
        self.channels = channels
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        b, c, h, w = x.shape
        sc = ad.reshape(self.scale, (1, c, 1, 1))
        sh = ad.reshape(self.shift, (1, c, 1, 1))
        if training:
            mu = ad.tmean(x, axis=(0, 2, 3), keepdims=True)
            d = x - mu
            var = ad.tmean(d * d, axis=(0, 2, 3), keepdims=True)
            m = BATCH_NORM_MOMENTUM
            # Quantized like the parameters so checkpoints round-trip bitwise.
            self.running_mean = _quantize_f32(
                (1 - m) * self.running_mean + m * mu.data.reshape(c)
            )
            self.running_var = _quantize_f32(
                (1 - m) * self.running_var + m * var.data.reshape(c)
            )
            xn = d / ad.sqrt(var + NORM_EPS)
        else:
            mu = Tensor(self.running_mean.reshape(1, c, 1, 1))
            var = Tensor(self.running_var.reshape(1, c, 1, 1))
            xn = (x - mu) / ad.sqrt(var + NORM_EPS)
        return xn * sc + sh

    def parameters(self):
        return [self.scale, self.shift]

    def buffers(self):
        return [self.running_mean, self.running_var]


def _make_norm(kind, name, channels):
    if kind == "group":
        return _GroupNorm(name, channels)
    return _BatchNorm2d(name, channels)


class _DoubleConv:
    """(conv3x3 -> norm -> relu) twice."""

    def __init__(self, name, cin, cout, norm_kind, rng):
        self.name = name
        self.conv1 = _Conv2d(name + ".conv1", cin, cout, 3, 1, rng)
        self.norm1 = _make_norm(norm_kind, name + ".norm1", cout)
        self.conv2 = _Conv2d(name + ".conv2", cout, cout, 3, 1, rng)
        self.norm2 = _make_norm(norm_kind, name + ".norm2", cout)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        x = ad.relu(self.norm1(self.conv1(x), training))
        x = ad.relu(self.norm2(self.conv2(x), training))
        return x

    def parameters(self):
        return (
            self.conv1.parameters()
            + self.norm1.parameters()
            + self.conv2.parameters()
            + self.norm2.parameters()
        )

    def buffers(self):
        return self.norm1.buffers() + self.norm2.buffers()


class UNet:
    def __init__(self, cfg: UNetConfig):
        self.cfg = cfg
        self.training = True
        rng = Xoshiro256StarStar(derive_seed(cfg.seed, STREAM_INIT))
        ch = [cfg.base_channels * 2**i for i in range(cfg.depth)]
        self.enc = [
            _DoubleConv(
                f"enc_{i}", cfg.in_channels if i == 0 else ch[i - 1], ch[i], cfg.norm, rng
            )
            for i in range(cfg.depth - 1)
        ]
        self.bottleneck = _DoubleConv(
            "bottleneck", ch[cfg.depth - 2], ch[cfg.depth - 1], cfg.norm, rng
        )
        # Decoder blocks in application order, deepest first.  Each consumes
        # the upsampled deeper feature concatenated with its skip.
        self.dec = [
            _DoubleConv(f"dec_{i}", ch[i + 1] + ch[i], ch[i], cfg.norm, rng)
            for i in reversed(range(cfg.depth - 1))
        ]
        self.head = _Conv2d("head", ch[0], cfg.out_classes, 1, 0, rng)

    def train(self):
        self.training = True

    def eval(self):
        self.training = False

    def _blocks(self):
        return self.enc + [self.bottleneck] + self.dec + [self.head]

    def parameters(self) -> list[Tensor]:
        out = []
        for blk in self._blocks():
            out.extend(blk.parameters())
        return out

    def buffers(self) -> list[np.ndarray]:
        out = []
        for blk in self._blocks():
            if hasattr(blk, "buffers"):
                out.extend(blk.buffers())
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        if x.ndim != 4:
            raise DataError(f"expected a (B, C, H, W) batch, got shape {x.shape}")
        b, c, h, w = x.shape
        if c != self.cfg.in_channels:
            raise DataError(f"expected {self.cfg.in_channels} input channels, got {c}")
        div = 2 ** (self.cfg.depth - 1)
        if h % div or w % div:
            raise DataError(f"input dims {h}x{w} not divisible by {div}")
        skips = []
        for blk in self.enc:
            x = ad.check_finite(blk(x, self.training), blk.name)
            skips.append(x)
            x = ad.maxpool2(x)
        x = ad.check_finite(self.bottleneck(x, self.training), self.bottleneck.name)
        for blk, skip in zip(self.dec, reversed(skips)):
            x = ad.concat([ad.upsample2(x), skip], axis=1)
            x = ad.check_finite(blk(x, self.training), blk.name)
        x = ad.check_finite(self.head(x), self.head.name)
        return ad.softmax_channels(x)

    __call__ = forward


def build_unet(cfg: UNetConfig) -> UNet:
    return UNet(cfg)


class Adam:
    def __init__(self, params: list[Tensor], learning_rate: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {learning_rate}")
        self.params = list(params)
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data = _quantize_f32(p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps))
            if not np.isfinite(p.data).all():
                raise NumericalError(f"non-finite parameter after optimizer step {t}")


def backward_and_step(model: UNet, loss_node: Tensor, opt: Adam) -> UNet:
    if loss_node.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss_node.shape}")
    opt.zero_grad()
    loss_node.backward()
    opt.step()
    return model


# -- serialization ---------------------------------------------------------


def _config_json(cfg: UNetConfig) -> bytes:
    doc = {
        "base_channels": cfg.base_channels,
        "depth": cfg.depth,
        "in_channels": cfg.in_channels,
        "norm": cfg.norm,
        "out_classes": cfg.out_classes,
        "seed": cfg.seed,
    }
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def save_model(model: UNet, path) -> None:
    cfg_bytes = _config_json(model.cfg)
    arrays = [p.data for p in model.parameters()] + model.buffers()
    try:
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<BI", MODEL_VERSION, len(cfg_bytes)))
            fh.write(cfg_bytes)
            for a in arrays:
                fh.write(a.astype("<f4").tobytes())
    except OSError as e:
        raise DataError(f"cannot write model file {path}: {e}") from e


def load_model(path) -> UNet:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read model file {path}: {e}") from e
    if len(blob) < 9:
        raise DataError(f"model file {path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MODEL_MAGIC:
        raise DataError(f"model file {path}: bad magic {blob[:4]!r}")
    version, cfg_len = struct.unpack_from("<BI", blob, 4)
    if version != MODEL_VERSION:
        raise DataError(f"model file {path}: unsupported version {version}")
    if len(blob) < 9 + cfg_len:
        raise DataError(f"model file {path}: truncated config block")
    try:
        doc = json.loads(blob[9 : 9 + cfg_len].decode("utf-8"))
        cfg = UNetConfig(**doc)
    except (ValueError, TypeError) as e:
        raise DataError(f"model file {path}: bad config block: {e}") from e
    model = UNet(cfg)
    arrays = [p.data for p in model.parameters()] + model.buffers()
    expect = sum(a.size for a in arrays) * 4
    payload = blob[9 + cfg_len :]
    if len(payload) != expect:
        raise DataError(
            f"model file {path}: payload size mismatch, "
            f"expected {expect} bytes, got {len(payload)}"
        )
    off = 0
    for a in arrays:
        n = a.size * 4
        vals = np.frombuffer(payload, dtype="<f4", count=a.size, offset=off)
        a[...] = vals.astype(np.float64).reshape(a.shape)
        off += n
    return model


def save_training_state(path, opt: Adam, extra: dict) -> None:
    """Optimizer moments plus caller state (epoch, RNG state) for exact resume."""
    head = dict(extra)
    head["step"] = opt.step_count
    head_bytes = json.dumps(head, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(OPT_MAGIC)
            fh.write(struct.pack("<BI", OPT_VERSION, len(head_bytes)))
            fh.write(head_bytes)
            for buf in opt.m:
                fh.write(buf.astype("<f8").tobytes())
            for buf in opt.v:
                fh.write(buf.astype("<f8").tobytes())
    except OSError as e:
        raise DataError(f"cannot write optimizer file {path}: {e}") from e


def load_training_state(path, opt: Adam) -> dict:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read optimizer file {path}: {e}") from e
    if len(blob) < 9 or blob[:4] != OPT_MAGIC:
        raise DataError(f"optimizer file {path}: bad magic or truncated header")
    version, head_len = struct.unpack_from("<BI", blob, 4)
    if version != OPT_VERSION:
        raise DataError(f"optimizer file {path}: unsupported version {version}")
    head = json.loads(blob[9 : 9 + head_len].decode("utf-8"))
    expect = sum(m.size for m in opt.m) * 16
    payload = blob[9 + head_len :]
    if len(payload) != expect:
        raise DataError(
            f"optimizer file {path}: payload size mismatch, "
            f"expected {expect} bytes, got {len(payload)}"
        )
    off = 0
    for group in (opt.m, opt.v):
        for buf in group:
            vals = np.frombuffer(payload, dtype="<f8", count=buf.size, offset=off)
            buf[...] = vals.reshape(buf.shape)
            off += buf.size * 8
    opt.step_count = int(head.pop("step"))
    return head
