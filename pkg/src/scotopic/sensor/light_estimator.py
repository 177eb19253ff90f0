"""PPP estimation from a single count image.

The image is box-filtered with an s x s kernel, the median of the top-k
responses is taken as a brightness proxy, and a quadratic in
``log(1 + response)`` regresses ``log PPP``. ``s``, ``k`` and the quadratic
are fitted on labeled (image, PPP) pairs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import convolve2d

from scotopic.errors import LightEstimatorError
from scotopic.rng import Purpose, make_rng
from scotopic.sensor.photon_sim import CountImage, NoiseConfig, readout_batch, render_counts

logger = logging.getLogger(__name__)

BOX_SIZES = (1, 2, 3, 4, 5, 7)
TOP_KS = (1, 3, 5, 10, 25)
MIN_TRAINING_PAIRS = 10
HOLDOUT_EVERY = 5


@dataclass(frozen=True)
class LightEstimator:
    box_size: int
    top_k: int
    poly_coeffs: tuple[float, float, float] | None = None
    response_min: float = 0.0
    response_max: float = 0.0
    ppp_min: float = 0.0
    ppp_max: float = 0.0
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.box_size < 1 or self.top_k < 1:
            raise LightEstimatorError(f"box size and top-k must be >= 1, got s={self.box_size}, k={self.top_k}")

    @property
    def is_fitted(self) -> bool:
        return self.poly_coeffs is not None

    def to_record(self) -> dict:
        a, b, c = self.poly_coeffs if self.is_fitted else (math.nan,) * 3
        return {
            "s": self.box_size,
            "k": self.top_k,
            "a": a,
            "b": b,
            "c": c,
            "response_min": self.response_min,
            "response_max": self.response_max,
            "ppp_min": self.ppp_min,
            "ppp_max": self.ppp_max,
        }

    @classmethod
    def from_record(cls, record: dict) -> "LightEstimator":
        coeffs = (float(record["a"]), float(record["b"]), float(record["c"]))
        return cls(
            box_size=int(record["s"]),
            top_k=int(record["k"]),
            poly_coeffs=None if any(math.isnan(v) for v in coeffs) else coeffs,
            response_min=float(record["response_min"]),
            response_max=float(record["response_max"]),
            ppp_min=float(record["ppp_min"]),
            ppp_max=float(record["ppp_max"]),
        )


def _as_plane(counts: CountImage | np.ndarray) -> np.ndarray:
    values = counts.counts if isinstance(counts, CountImage) else counts
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        values = values.sum(axis=2)
    if values.ndim != 2:
        raise LightEstimatorError(f"expected an (H, W[, C]) count image, got shape {values.shape}")
    return values


def pooled_response(counts: CountImage | np.ndarray, s: int, k: int) -> float:
    """Median of the k largest s x s box sums over valid positions (channels summed)."""
    plane = _as_plane(counts)
    h, w = plane.shape
    if s < 1 or k < 1:
        raise LightEstimatorError(f"s and k must be >= 1, got s={s}, k={k}")
    if h < s or w < s:
        raise LightEstimatorError(f"image {h}x{w} is smaller than the {s}x{s} box")
    positions = (h - s + 1) * (w - s + 1)
    if k > positions:
        raise LightEstimatorError(f"top-k={k} exceeds the {positions} valid box positions")
    responses = convolve2d(plane, np.ones((s, s)), mode="valid").ravel()
    return float(np.median(np.partition(responses, positions - k)[positions - k :]))


def _monotone(coeffs: np.ndarray, lo: float, hi: float) -> bool:
    a, b, _ = coeffs
    return 2 * a * lo + b > 0 and 2 * a * hi + b > 0


def _log_ppp(coeffs, r: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Quadratic inside [lo, hi], continued linearly with the end slope outside it."""
    a, b, _ = coeffs
    inside = np.clip(r, lo, hi)
    slope = 2 * a * inside + b
    return np.polyval(coeffs, inside) + slope * (r - inside)


def _candidate_valid(shapes: set[tuple[int, int]], s: int, k: int) -> bool:
    return all(h >= s and w >= s and k <= (h - s + 1) * (w - s + 1) for h, w in shapes)


def fit(
    pairs: Sequence[tuple[CountImage, float]],
    box_sizes: Sequence[int] = BOX_SIZES,
    top_ks: Sequence[int] = TOP_KS,
    seed: int = 0,
) -> LightEstimator:
    if len(pairs) < MIN_TRAINING_PAIRS:
        raise LightEstimatorError(f"need at least {MIN_TRAINING_PAIRS} training pairs, got {len(pairs)}")
    ppps = np.array([float(p) for _, p in pairs])
    if np.any(ppps <= 0):
        raise LightEstimatorError("training PPPs must be > 0")
    if ppps.max() / ppps.min() < 10.0:
        raise LightEstimatorError(f"training PPPs must span at least a decade, got [{ppps.min()}, {ppps.max()}]")

    planes = [_as_plane(c) for c, _ in pairs]
    shapes = {p.shape for p in planes}
    target = np.log(ppps)
    order = make_rng(seed, Purpose.SPLIT).permutation(len(pairs))
    held_out = np.zeros(len(pairs), dtype=bool)
    held_out[order[::HOLDOUT_EVERY]] = True

    best = None
    for s in box_sizes:
        for k in top_ks:
            if not _candidate_valid(shapes, s, k):
                continue
            r = np.log1p([pooled_response(p, s, k) for p in planes])
            train_r = r[~held_out]
            if np.ptp(train_r) == 0.0:
                logger.debug(f"Skipping s={s}, k={k}: all training responses equal")
                continue
            coeffs = np.polyfit(train_r, target[~held_out], 2)
            lo, hi = float(train_r.min()), float(train_r.max())
            if not _monotone(coeffs, lo, hi):
                logger.debug(f"Skipping s={s}, k={k}: fitted quadratic is not increasing")
                continue
            predicted = np.exp(_log_ppp(coeffs, r[held_out], lo, hi))
            error = float(np.median(np.abs(predicted - ppps[held_out]) / ppps[held_out]))
            if best is None or error < best[0]:
                best = (error, s, k, coeffs, r)

    if best is None:
        raise LightEstimatorError("no (s, k) candidate produced a usable fit")

    error, s, k, coeffs, r = best
    refit = np.polyfit(r, target, 2)
    lo, hi = float(r.min()), float(r.max())
    if _monotone(refit, lo, hi):
        coeffs = refit
    else:
        lo, hi = float(r[~held_out].min()), float(r[~held_out].max())
    logger.info(f"Light estimator fitted: s={s}, k={k}, held-out median relative error {error:.3f}")
    return LightEstimator(
        box_size=s,
        top_k=k,
        poly_coeffs=tuple(float(c) for c in coeffs),
        response_min=lo,
        response_max=hi,
        ppp_min=float(ppps.min()),
        ppp_max=float(ppps.max()),
        diagnostics={"heldout_median_rel_error": error, "num_pairs": len(pairs)},
    )


def estimate_ppp(est: LightEstimator | None, counts: CountImage | np.ndarray) -> float:
    if est is None or not est.is_fitted:
        raise LightEstimatorError("light estimator has not been fitted")
    lower, upper = est.ppp_min / 10.0, est.ppp_max * 10.0
    response = pooled_response(counts, est.box_size, est.top_k)
    if response <= 0.0:
        return lower
    log_ppp = _log_ppp(est.poly_coeffs, np.log1p(response), est.response_min, est.response_max)
    return float(np.clip(np.exp(log_ppp), lower, upper))


def equivalent_time(ppp_hat: float, illuminance: float, bin_width: float) -> float:
    """Bins that would yield ``ppp_hat`` at the given illuminance."""
    if illuminance <= 0 or bin_width <= 0:
        raise LightEstimatorError(f"illuminance and bin width must be > 0, got {illuminance}, {bin_width}")
    if ppp_hat < 0:
        raise LightEstimatorError(f"PPP estimate must be >= 0, got {ppp_hat}")
    return ppp_hat / (illuminance * bin_width)


def ppp_of(t: float, illuminance: float, bin_width: float) -> float:
    if illuminance <= 0 or bin_width <= 0:
        raise LightEstimatorError(f"illuminance and bin width must be > 0, got {illuminance}, {bin_width}")
    return t * (illuminance * bin_width)


def training_pairs(pixels: np.ndarray, ppps: Sequence[float], cfg: NoiseConfig, seed: int) -> list[tuple[CountImage, float]]:
    """Readout-corrupted count images of every image at every PPP."""
    pairs = []
    for level, ppp in enumerate(ppps):
        rng = make_rng(seed, Purpose.LIGHT, level)
        counts = readout_batch(render_counts(pixels, float(ppp), cfg, rng), cfg, rng)
        pairs.extend((CountImage(counts=c, num_bins=int(round(ppp / cfg.ppp_per_bin)), ppp=float(ppp)), float(ppp)) for c in counts)
    return pairs
