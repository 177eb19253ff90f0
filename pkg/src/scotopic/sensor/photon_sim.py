"""Photon-counting sensor simulation.

Shot noise and dark current follow a per-pixel Poisson process whose rate is
``illuminance * (I + dark_current) / (1 + dark_current)``. Read noise (additive
Gaussian) and fixed-pattern noise (multiplicative Gaussian gain) are applied
at readout, in that order, to an accumulated count image. Rotational jitter
is a Gaussian random walk over bins whose cumulative std at PPP ``p`` is
``jitter_std * p / 220`` degrees.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from functools import cached_property

import numpy as np
from scipy import ndimage

from scotopic.errors import SensorError
from scotopic.rng import Seed, as_generator

logger = logging.getLogger(__name__)

JITTER_REFERENCE_PPP = 220.0
FPN_GAIN_FLOOR = 1e-3


@dataclass(frozen=True)
class IntensityImage:
    """Ground-truth intensities in [0, 1] laid out as (height, width, channels)."""

    pixels: np.ndarray
    label: int | None = None

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3 or 0 in pixels.shape:
            raise SensorError(f"image must be a non-empty (H, W[, C]) array, got shape {pixels.shape}")
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise SensorError("image intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", pixels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class NoiseConfig:
    dark_current: float = 0.03
    read_noise_std: float = 0.15
    fpn_std: float = 0.03
    jitter_std: float = 0.0
    illuminance: float = 1.0
    bin_width: float = 0.22

    def __post_init__(self):
        for name in ("dark_current", "read_noise_std", "fpn_std", "jitter_std"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise SensorError(f"{name} must be a finite value >= 0, got {value}")
        for name in ("illuminance", "bin_width"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise SensorError(f"{name} must be > 0, got {value}")

    @property
    def ppp_per_bin(self) -> float:
        return self.illuminance * self.bin_width

    def ppp_at(self, num_bins: float) -> float:
        """PPP after ``num_bins`` bins at constant illuminance."""
        return self.illuminance * num_bins * self.bin_width

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass(frozen=True)
class CountImage:
    """Cumulative counts N_t with the exposure they were collected over."""

    counts: np.ndarray
    num_bins: int
    ppp: float

    def __post_init__(self):
        if self.num_bins < 0:
            raise SensorError(f"num_bins must be >= 0, got {self.num_bins}")
        if self.ppp < 0:
            raise SensorError(f"ppp must be >= 0, got {self.ppp}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.counts.shape


@dataclass(frozen=True)
class PhotonStream:
    """Per-bin photon counts X_t, t = 1..num_bins, for one source image."""

    frames: np.ndarray
    bin_width: float
    illuminance: float
    fpn_gains: np.ndarray
    source_label: int | None = None
    angles: np.ndarray | None = None

    @property
    def num_bins(self) -> int:
        return int(self.frames.shape[0])

    @property
    def shape(self) -> tuple[int, ...]:
        return self.frames.shape[1:]

    @property
    def ppp_per_bin(self) -> float:
        return self.illuminance * self.bin_width

    @cached_property
    def cumulative(self) -> np.ndarray:
        """Running sums with a leading zero frame: ``cumulative[t]`` is N_t."""
        cumsum = np.zeros((self.num_bins + 1,) + self.shape, dtype=np.int64)
        np.cumsum(self.frames, axis=0, out=cumsum[1:])
        return cumsum


def pixel_rate(intensity, cfg: NoiseConfig):
    """Photon rate, in photons per unit time, for a scalar or array of intensities."""
    values = np.asarray(intensity, dtype=np.float64)
    if not np.all(np.isfinite(values)) or values.min(initial=0.0) < 0.0 or values.max(initial=0.0) > 1.0:
        raise SensorError("intensity must lie in [0, 1]")
    if cfg.illuminance <= 0:
        raise SensorError(f"illuminance must be > 0, got {cfg.illuminance}")
    rate = cfg.illuminance * (values + cfg.dark_current) / (1.0 + cfg.dark_current)
    if rate.ndim == 0:
        return float(rate)
    return rate


def jitter_std_at(jitter_std: float, ppp: float) -> float:
    """Std (degrees) of the total rotation after ``ppp`` photons per pixel."""
    return jitter_std * ppp / JITTER_REFERENCE_PPP


def rotate_pixels(pixels: np.ndarray, angle: float) -> np.ndarray:
    """Rotates about the image center; bilinear, zero padded."""
    if angle == 0.0:
        return pixels
    rotated = ndimage.rotate(pixels, angle, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)
    return np.clip(rotated, 0.0, 1.0)


def apply_jitter(img: IntensityImage, jitter_std: float, ppp: float, seed: Seed) -> IntensityImage:
    if ppp < 0:
        raise SensorError(f"ppp must be >= 0, got {ppp}")
    std = jitter_std_at(jitter_std, ppp)
    if std == 0.0:
        return img
    angle = float(as_generator(seed).normal(0.0, std))
    return IntensityImage(rotate_pixels(img.pixels, angle), label=img.label)


def _draw_gains(shape, cfg: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    gains = 1.0 + rng.normal(0.0, cfg.fpn_std, size=shape)
    return np.maximum(gains, FPN_GAIN_FLOOR)


def simulate_stream(img: IntensityImage, cfg: NoiseConfig, num_bins: int, seed: Seed) -> PhotonStream:
    if num_bins < 1:
        raise SensorError(f"num_bins must be >= 1, got {num_bins}")
    rng = as_generator(seed)
    shape = img.shape
    gains = _draw_gains(shape, cfg, rng)

    if cfg.jitter_std == 0.0:
        means = pixel_rate(img.pixels, cfg) * cfg.bin_width
        frames = rng.poisson(means, size=(num_bins,) + shape).astype(np.int32)
        angles = None
    else:
        # Random walk whose marginal std at bin t is jitter_std * PPP(t) / 220.
        stds = np.array([jitter_std_at(cfg.jitter_std, cfg.ppp_at(t)) for t in range(num_bins + 1)])
        steps = rng.normal(0.0, 1.0, size=num_bins) * np.sqrt(np.diff(stds**2))
        angles = np.cumsum(steps)
        frames = np.empty((num_bins,) + shape, dtype=np.int32)
        for t, angle in enumerate(angles):
            rotated = rotate_pixels(img.pixels, float(angle))
            frames[t] = rng.poisson(pixel_rate(rotated, cfg) * cfg.bin_width)

    return PhotonStream(
        frames=frames,
        bin_width=cfg.bin_width,
        illuminance=cfg.illuminance,
        fpn_gains=gains,
        source_label=img.label,
        angles=angles,
    )


def accumulate(stream: PhotonStream, t: int) -> CountImage:
    if t < 0 or t > stream.num_bins:
        raise SensorError(f"t={t} outside the stream's 0..{stream.num_bins} bins")
    return CountImage(counts=stream.cumulative[t].copy(), num_bins=int(t), ppp=stream.illuminance * t * stream.bin_width)


def readout(counts: CountImage, stream: PhotonStream, cfg: NoiseConfig, seed: Seed) -> CountImage:
    """Additive read noise, then the stream's multiplicative gains, clamped at zero."""
    if counts.shape != stream.fpn_gains.shape:
        raise SensorError(f"count image shape {counts.shape} does not match sensor shape {stream.fpn_gains.shape}")
    values = counts.counts.astype(np.float64)
    if cfg.read_noise_std > 0:
        values = values + as_generator(seed).normal(0.0, cfg.read_noise_std, size=values.shape)
    values = np.maximum(values * stream.fpn_gains, 0.0)
    return CountImage(counts=values, num_bins=counts.num_bins, ppp=counts.ppp)


def render_counts(pixels: np.ndarray, ppp, cfg: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """Draws N directly at the given PPP(s), bypassing the per-bin stream.

    ``pixels`` is (..., H, W, C); ``ppp`` is a scalar or broadcasts against the
    leading axes. Equal in distribution to summing a constant-illuminance
    stream over ``ppp / ppp_per_bin`` bins.
    """
    ppp = np.asarray(ppp, dtype=np.float64)
    if np.any(ppp < 0):
        raise SensorError("ppp must be >= 0")
    scale = ppp.reshape(ppp.shape + (1,) * (pixels.ndim - ppp.ndim)) / cfg.illuminance
    return rng.poisson(pixel_rate(pixels, cfg) * scale).astype(np.float64)


def simulate_counts(img: IntensityImage, cfg: NoiseConfig, ppp: float, seed: Seed) -> CountImage:
    num_bins = int(round(ppp / cfg.ppp_per_bin))
    realized = cfg.ppp_at(num_bins)
    counts = render_counts(img.pixels, realized, cfg, as_generator(seed))
    return CountImage(counts=counts, num_bins=num_bins, ppp=realized)


def log_ppp_grid(ppp_min: float, ppp_max: float, num: int) -> np.ndarray:
    if not 0 < ppp_min < ppp_max or num < 1:
        raise SensorError(f"invalid PPP grid ({ppp_min}, {ppp_max}, {num})")
    if num == 1:
        return np.array([ppp_max])
    return np.geomspace(ppp_min, ppp_max, num)


def query_bins(cfg: NoiseConfig, ppps) -> np.ndarray:
    """Stream bins for the requested PPPs: nearest bin, at least 1, deduplicated."""
    bins = np.rint(np.asarray(ppps, dtype=np.float64) / cfg.ppp_per_bin).astype(np.int64)
    return np.unique(np.maximum(bins, 1))


def bits_of_signal(t: float, illuminance_lux: float) -> float:
    """Approximate bits of signal per pixel after ``t`` seconds at ``illuminance_lux``."""
    if t <= 0 or illuminance_lux <= 0:
        raise SensorError(f"exposure time and illuminance must be > 0, got t={t}, E_v={illuminance_lux}")
    return 5.0 + 0.5 * math.log2(t) + 0.5 * math.log2(illuminance_lux)


def readout_batch(counts: np.ndarray, cfg: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """Readout corruption for a batch (N, H, W, C) of independent sensors.

    Each example gets its own gain realization, as if it were read from a
    fresh stream.
    """
    values = np.asarray(counts, dtype=np.float64)
    if cfg.read_noise_std > 0:
        values = values + rng.normal(0.0, cfg.read_noise_std, size=values.shape)
    if cfg.fpn_std > 0:
        values = values * _draw_gains(values.shape, cfg, rng)
    return np.maximum(values, 0.0)
