"""Semantic encoder-decoder: synthetic data, training, SSIM, byte accounting."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import numkit
from .channel import ChannelParams, transmit_batch
from .errors import ConfigurationError, DimensionError, TrainingError
from .numkit import DenseNet, RngStream

# ---------------------------------------------------------------------------
# synthetic shapes

# Each shape is a list of primitives in unit coordinates centred on 0;
# ("seg", x0, y0, x1, y1) is a stroke, ("disc", r) a filled disc.
_SHAPES = {
    "bar": [("seg", -0.38, 0.0, 0.38, 0.0)],
    "cross": [("seg", -0.38, 0.0, 0.38, 0.0), ("seg", 0.0, -0.38, 0.0, 0.38)],
    "box": [("seg", -0.3, -0.3, 0.3, -0.3), ("seg", 0.3, -0.3, 0.3, 0.3),
            ("seg", 0.3, 0.3, -0.3, 0.3), ("seg", -0.3, 0.3, -0.3, -0.3)],
    "diagonal": [("seg", -0.34, -0.34, 0.34, 0.34)],
    "vbar": [("seg", 0.0, -0.38, 0.0, 0.38)],
    "antidiagonal": [("seg", -0.34, 0.34, 0.34, -0.34)],
    "disc": [("disc", 0.22)],
    "chevron": [("seg", -0.34, -0.3, 0.0, 0.3), ("seg", 0.0, 0.3, 0.34, -0.3)],
}

GENERATORS = {
    "shapes4": ("bar", "cross", "box", "diagonal"),
    "shapes8": ("bar", "cross", "box", "diagonal", "vbar", "antidiagonal", "disc", "chevron"),
}


@dataclass(frozen=True)
class Jitter:
    shift: float = 0.6  # pixels, uniform +-
    scale: tuple = (0.93, 1.07)
    width: tuple = (0.9, 1.2)  # stroke sigma in pixels
    intensity: tuple = (0.8, 1.0)
    noise_std: float = 0.02


DEFAULT_JITTER = Jitter()
NO_JITTER = Jitter(0.0, (1.0, 1.0), (1.0, 1.0), (1.0, 1.0), 0.0)


def _seg_dist(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def render(shape: str, side: int, cx=0.0, cy=0.0, scale=1.0, width=1.0, intensity=1.0) -> np.ndarray:
    """Soft-edged rendering of a named shape; offsets and width in pixels."""
    coords = np.arange(side) + 0.5 - side / 2.0
    py, px = np.meshgrid(coords, coords, indexing="ij")
    px, py = px - cx, py - cy
    dist = np.full((side, side), np.inf)
    for prim in _SHAPES[shape]:
        if prim[0] == "seg":
            x0, y0, x1, y1 = (v * side * scale for v in prim[1:])
            dist = np.minimum(dist, _seg_dist(px, py, x0, y0, x1, y1))
        else:
            dist = np.minimum(dist, np.maximum(np.hypot(px, py) - prim[1] * side * scale, 0.0))
    return intensity * np.exp(-dist ** 2 / (2.0 * width ** 2))


@dataclass
class SyntheticDataset:
    images: np.ndarray  # [n, side*side] in [0, 1]
    labels: np.ndarray  # [n] int
    class_count: int
    generator_spec: str
    image_side: int
    targets: np.ndarray | None = None  # reconstruction targets; None means the images themselves

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.images.shape != (self.labels.size, self.image_side ** 2):
            raise DimensionError(f"images {self.images.shape} vs {self.labels.size} labels of side {self.image_side}")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if self.targets.shape != self.images.shape:
                raise DimensionError(f"targets {self.targets.shape} != images {self.images.shape}")

    @property
    def recon_targets(self) -> np.ndarray:
        return self.images if self.targets is None else self.targets

    def __len__(self):
        return self.labels.size

    @property
    def image_dim(self) -> int:
        return self.image_side ** 2

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx, dtype=int)
        targets = None if self.targets is None else self.targets[idx]
        return SyntheticDataset(self.images[idx], self.labels[idx], self.class_count,
                                self.generator_spec, self.image_side, targets)

    def of_class(self, cls: int) -> "SyntheticDataset":
        return self.subset(np.flatnonzero(self.labels == cls))


def class_names(spec: str) -> tuple:
    try:
        return GENERATORS[spec]
    except KeyError:
        raise ConfigurationError(f"unknown dataset generator {spec!r}; known: {sorted(GENERATORS)}") from None


def prototype(spec: str, cls: int, side: int = 16) -> np.ndarray:
    """Jitter-free, noise-free exemplar of a class."""
    names = class_names(spec)
    if not 0 <= cls < len(names):
        raise ConfigurationError(f"class {cls} not in generator {spec!r} ({len(names)} classes)")
    return render(names[cls], side).ravel()


def make_dataset(spec: str, n: int, rng: RngStream, image_side: int = 16,
                 jitter: Jitter = DEFAULT_JITTER) -> SyntheticDataset:
    names = class_names(spec)
    count = len(names)
    if n < count:
        raise ConfigurationError(f"need n >= class_count ({count}), got {n}")
    labels = np.arange(n) % count
    images = np.empty((n, image_side * image_side))
    for i, cls in enumerate(labels):
        u = rng.uniform(5)
        img = render(
            names[cls], image_side,
            cx=(2 * u[0] - 1) * jitter.shift,
            cy=(2 * u[1] - 1) * jitter.shift,
            scale=jitter.scale[0] + u[2] * (jitter.scale[1] - jitter.scale[0]),
            width=jitter.width[0] + u[3] * (jitter.width[1] - jitter.width[0]),
            intensity=jitter.intensity[0] + u[4] * (jitter.intensity[1] - jitter.intensity[0]),
        )
        if jitter.noise_std:
            img = img + jitter.noise_std * rng.normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0).ravel()
    return SyntheticDataset(images, labels, count, spec, image_side)


_MAGIC = b"VNSD"


def dump_dataset(data: SyntheticDataset, path) -> None:
    """Flat binary: magic, u32 n / image_side / class_count (LE), u8 pixels, u8 labels."""
    if data.class_count > 256:
        raise ConfigurationError("u8 labels allow at most 256 classes")
    pixels = np.round(np.clip(data.images, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<III", len(data), data.image_side, data.class_count))
        fh.write(pixels.tobytes(order="C"))
        fh.write(data.labels.astype(np.uint8).tobytes())


def load_dataset(path, generator_spec: str = "file") -> SyntheticDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ConfigurationError(f"{path}: bad magic {raw[:4]!r}")
    n, side, count = struct.unpack("<III", raw[4:16])
    npix = n * side * side
    if len(raw) != 16 + npix + n:
        raise ConfigurationError(f"{path}: truncated or oversized payload")
    pixels = np.frombuffer(raw, np.uint8, npix, 16).reshape(n, side * side)
    labels = np.frombuffer(raw, np.uint8, n, 16 + npix).astype(int)
    return SyntheticDataset(pixels / 255.0, labels, count, generator_spec, side)


# ---------------------------------------------------------------------------
# SSIM


@dataclass(frozen=True)
class SsimParams:
    dynamic_range: float = 1.0
    window_side: int = 8
    k1: float = 0.01
    k2: float = 0.03

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _as_square(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim >= 2 and x.shape[-1] == x.shape[-2]:
        return x
    side = int(round(np.sqrt(x.shape[-1])))
    if side * side != x.shape[-1]:
        raise DimensionError(f"last axis {x.shape[-1]} is not a square image")
    return x.reshape(x.shape[:-1] + (side, side))


def ssim_batch(a, b, p: SsimParams = SsimParams()) -> np.ndarray:
    """Per-image SSIM over non-overlapping tiles (last tile clipped), uniform weights."""
    a, b = _as_square(a), _as_square(b)
    if a.shape != b.shape:
        raise DimensionError(f"SSIM shape mismatch: {a.shape} vs {b.shape}")
    a, b = np.clip(a, 0.0, 1.0), np.clip(b, 0.0, 1.0)
    side, w = a.shape[-1], p.window_side
    c1, c2 = p.c1, p.c2
    vals = []
    for r in range(0, side, w):
        for c in range(0, side, w):
            ta = a[..., r:r + w, c:c + w].reshape(a.shape[:-2] + (-1,))
            tb = b[..., r:r + w, c:c + w].reshape(b.shape[:-2] + (-1,))
            ma, mb = ta.mean(axis=-1), tb.mean(axis=-1)
            da, db = ta - ma[..., None], tb - mb[..., None]
            va, vb = (da * da).mean(axis=-1), (db * db).mean(axis=-1)
            cov = (da * db).mean(axis=-1)
            num = (2 * ma * mb + c1) * (2 * cov + c2)
            den = (ma * ma + mb * mb + c1) * (va + vb + c2)
            vals.append(num / den)
    return np.mean(vals, axis=0)


def ssim(a, b, p: SsimParams = SsimParams()) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"SSIM shape mismatch: {a.shape} vs {b.shape}")
    return float(ssim_batch(a, b, p))


def per_class_ssim(recon: np.ndarray, data: SyntheticDataset, p: SsimParams = SsimParams()) -> np.ndarray:
    scores = ssim_batch(recon, data.images, p)
    return np.array([scores[data.labels == k].mean() for k in range(data.class_count)])


# ---------------------------------------------------------------------------
# codec


@dataclass(frozen=True)
class CodecConfig:
    latent_dim: int = 16
    hidden: int = 64
    epochs: int = 40
    lr: float = 4.0
    batch_size: int = 16


@dataclass(frozen=True)
class SemanticCodec:
    encoder: DenseNet
    decoder: DenseNet
    latent_dim: int
    image_side: int

    def __post_init__(self):
        if self.encoder.out_dim != self.latent_dim or self.decoder.in_dim != self.latent_dim:
            raise DimensionError("encoder output / decoder input must equal latent_dim")
        if self.latent_dim >= self.image_dim:
            raise ConfigurationError("latent_dim must be smaller than image_dim")

    @property
    def image_dim(self) -> int:
        return self.image_side ** 2

    @property
    def param_count(self) -> int:
        return self.encoder.param_count + self.decoder.param_count

    def encode(self, x) -> np.ndarray:
        return numkit.forward(self.encoder, x)

    def decode(self, z) -> np.ndarray:
        return numkit.forward(self.decoder, z)

    def reconstruct(self, x) -> np.ndarray:
        return self.decode(self.encode(x))

    def params(self) -> np.ndarray:
        return np.concatenate([numkit.flatten(self.encoder), numkit.flatten(self.decoder)])

    def with_params(self, flat) -> "SemanticCodec":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_count,):
            raise DimensionError(f"codec parameter vector {flat.shape} != ({self.param_count},)")
        ne = self.encoder.param_count
        return SemanticCodec(numkit.unflatten(self.encoder, flat[:ne]),
                             numkit.unflatten(self.decoder, flat[ne:]),
                             self.latent_dim, self.image_side)


def init_codec(image_side: int, cfg: CodecConfig, rng: RngStream) -> SemanticCodec:
    dim = image_side ** 2
    enc = numkit.init_net([dim, cfg.hidden, cfg.latent_dim], ["relu", "identity"], rng.child("encoder"))
    dec = numkit.init_net([cfg.latent_dim, cfg.hidden, dim], ["relu", "sigmoid"], rng.child("decoder"))
    return SemanticCodec(enc, dec, cfg.latent_dim, image_side)


def codec_loss_grad(codec: SemanticCodec, x, target) -> tuple:
    """MSE(decode(encode(x)), target) and its gradient over all codec params."""
    etrace = numkit.forward_trace(codec.encoder, x)
    dtrace = numkit.forward_trace(codec.decoder, etrace[-1][2])
    loss, gy = numkit.loss_and_grad("mse", dtrace[-1][2], np.asarray(target, dtype=np.float64))
    gdec, gz = numkit.backprop(codec.decoder, dtrace, gy)
    genc, _ = numkit.backprop(codec.encoder, etrace, gz)
    return loss, np.concatenate([genc, gdec])


def fit_codec(codec: SemanticCodec, x, target, epochs: int, lr: float, batch_size: int,
              rng: RngStream, tag: str = "") -> tuple:
    flat = codec.params()
    n = x.shape[0]
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = codec_loss_grad(codec, x[idx], target[idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(grads)):
                raise TrainingError(f"{tag + ': ' if tag else ''}loss diverged at epoch {epoch}")
            if lr:
                flat = flat - lr * grads
                codec = codec.with_params(flat)
            total += loss * len(idx)
        history.append(total / n)
    return codec, history


def reconstruction_mse(codec: SemanticCodec, data: SyntheticDataset) -> float:
    return float(np.mean((codec.reconstruct(data.images) - data.images) ** 2))


def train_codec(train: SyntheticDataset, cfg: CodecConfig, rng: RngStream,
                init: SemanticCodec | None = None) -> SemanticCodec:
    if cfg.epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    codec = init if init is not None else init_codec(train.image_side, cfg, rng.child("init"))
    codec, _ = fit_codec(codec, train.images, train.recon_targets, cfg.epochs, cfg.lr, cfg.batch_size,
                         rng.child("shuffle"), tag="train_codec")
    return codec


def mean_ssim(codec: SemanticCodec, data: SyntheticDataset, p: SsimParams = SsimParams()) -> float:
    return float(ssim_batch(codec.reconstruct(data.images), data.images, p).mean())


def quantize_latents(z: np.ndarray, bits: int = 8) -> np.ndarray:
    """Per-row affine quantization to ``bits`` levels and back."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    lo, hi = z.min(axis=1, keepdims=True), z.max(axis=1, keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    levels = 2 ** bits - 1
    q = np.round((z - lo) / span * levels)
    return lo + q / levels * span


def end_to_end_ssim(codec: SemanticCodec, ch: ChannelParams, data: SyntheticDataset, rng: RngStream,
                    p: SsimParams = SsimParams(), quantize: bool = False) -> float:
    """Mean SSIM of decode(channel(encode(x))) against x, one fading block per image."""
    z = codec.encode(data.images)
    if quantize:
        z = quantize_latents(z)
    received, _, _ = transmit_batch(z, ch, rng)
    return float(ssim_batch(codec.decode(received), data.images, p).mean())


class Overhead(NamedTuple):
    raw_bytes: int
    semantic_bytes: int
    ratio: float


def overhead_ratio(codec: SemanticCodec, frames: int) -> Overhead:
    """Bytes for 8-bit raw pixels vs 8-bit quantized latents over ``frames`` images."""
    if frames < 1:
        raise ConfigurationError("frames must be >= 1")
    raw = frames * codec.image_dim
    sem = frames * codec.latent_dim
    return Overhead(raw, sem, raw / sem)
