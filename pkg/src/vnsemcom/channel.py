"""Block flat-fading channels (AWGN, Rayleigh, Rician) with zero-forcing receivers."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DeepFadeError
from .numkit import RngStream

KINDS = ("awgn_only", "rayleigh", "rician")
NO_NOISE = math.inf  # snr_db sentinel: noise disabled
DEEP_FADE = 1e-9
CSI_DIM = 5
_CSI_SNR_CAP = 60.0


@dataclass(frozen=True)
class ChannelParams:
    kind: str = "awgn_only"
    k_factor: float = 0.0
    snr_db: float = NO_NOISE

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown channel kind {self.kind!r}")
        if not self.k_factor >= 0:
            raise ConfigurationError(f"k_factor must be >= 0, got {self.k_factor}")
        if math.isnan(self.snr_db):
            raise ConfigurationError("snr_db is NaN")

    @property
    def noiseless(self) -> bool:
        return self.snr_db == math.inf


@dataclass(frozen=True)
class ChannelRealization:
    h_re: float
    h_im: float
    noise_power: float = 0.0

    @property
    def h(self) -> complex:
        return complex(self.h_re, self.h_im)


def _draw_h(params: ChannelParams, rng: RngStream, size=None):
    if params.kind == "awgn_only":
        return np.ones(size, dtype=complex) if size is not None else 1 + 0j
    a, b = rng.normal(size), rng.normal(size)
    if params.kind == "rayleigh":
        return (a + 1j * b) / math.sqrt(2.0)
    k = params.k_factor
    return math.sqrt(k / (k + 1.0)) + (a + 1j * b) / math.sqrt(2.0 * (k + 1.0))


def sample_fading(params: ChannelParams, rng: RngStream) -> ChannelRealization:
    h = complex(_draw_h(params, rng))
    return ChannelRealization(h.real, h.imag, 0.0)


def _draw_h_checked(params, rng, size):
    h = _draw_h(params, rng, size)
    faded = np.abs(h) < DEEP_FADE
    if np.any(faded):
        # one resample per faded block, then give up
        h = np.where(faded, _draw_h(params, rng, size), h)
        if np.any(np.abs(h) < DEEP_FADE):
            raise DeepFadeError(f"|h| < {DEEP_FADE} after resampling ({params.kind})")
    return h


def _to_symbols(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] % 2:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (1,))], axis=-1)
    return x[..., 0::2] + 1j * x[..., 1::2]


def _from_symbols(s: np.ndarray, length: int) -> np.ndarray:
    out = np.empty(s.shape[:-1] + (2 * s.shape[-1],))
    out[..., 0::2] = s.real
    out[..., 1::2] = s.imag
    return out[..., :length]


def transmit_batch(signals, params: ChannelParams, rng: RngStream) -> tuple:
    """Send each row of ``signals`` as its own fading block.

    Returns (equalized received rows, complex gains h per row, noise power per row).
    Noise power is set against the empirical power of each transmitted row.
    """
    x = np.asarray(signals, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ConfigurationError(f"signals must be a non-empty [blocks x length] array, got {x.shape}")
    sym = _to_symbols(x)
    h = np.broadcast_to(_draw_h_checked(params, rng, x.shape[0]), (x.shape[0],))
    power = np.mean(np.abs(sym) ** 2, axis=1)
    if params.noiseless:
        noise_power = np.zeros(x.shape[0])
        y = h[:, None] * sym
    else:
        noise_power = power / 10.0 ** (params.snr_db / 10.0)
        std = np.sqrt(noise_power / 2.0)[:, None]
        n = std * (rng.normal(sym.shape) + 1j * rng.normal(sym.shape))
        y = h[:, None] * sym + n
    return _from_symbols(y / h[:, None], x.shape[1]), np.asarray(h), noise_power


def transmit(signal, params: ChannelParams, rng: RngStream) -> tuple:
    x = np.asarray(signal, dtype=np.float64)
    flat = x.reshape(1, -1)
    if flat.size == 0:
        raise ConfigurationError("cannot transmit an empty signal")
    received, h, noise_power = transmit_batch(flat, params, rng)
    real = ChannelRealization(float(h[0].real), float(h[0].imag), float(noise_power[0]))
    return received.reshape(x.shape), real


def csi_features(params: ChannelParams) -> np.ndarray:
    """[K/(K+1), snr_db/30, one-hot(awgn_only, rayleigh, rician)].

    K only counts for rician links; a disabled-noise SNR is capped at 60 dB.
    """
    k = params.k_factor if params.kind == "rician" else 0.0
    snr = min(params.snr_db, _CSI_SNR_CAP)
    onehot = [1.0 if params.kind == kind else 0.0 for kind in KINDS]
    return np.array([k / (k + 1.0), snr / 30.0, *onehot])
