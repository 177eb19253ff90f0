"""Sequential decisions on photon streams.

The free-response (FR) rule queries the classifier on a log-spaced PPP grid
and stops at the first query where the largest log posterior ratio strictly
exceeds the schedule's threshold; at the cutoff PPP it declares the argmax.
The interrogation (INT) rule answers once at a fixed PPP.

Each query reads the accumulated counts out with fresh read noise drawn from
``make_rng(seed, Purpose.READOUT, example, bin)``, so FR and INT see exactly
the same corrupted image whenever they query the same bin.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from scotopic.errors import DecisionError
from scotopic.rng import Purpose, make_rng
from scotopic.sensor.photon_sim import NoiseConfig, PhotonStream, accumulate, readout, simulate_stream
from scotopic.tools.idx import ImageSet
from scotopic.tools.stats import DEFAULT_RESAMPLES, bootstrap_se

logger = logging.getLogger(__name__)

SAT_COLUMNS = ["regime", "threshold_or_ppp", "median_ppp", "mean_ppp", "error_rate", "median_ppp_se", "error_se", "n_examples"]


class StopReason(str, Enum):
    THRESHOLD = "threshold-crossing"
    CUTOFF = "cutoff"


class Regime(str, Enum):
    FR = "FR"
    INT = "INT"


@dataclass(frozen=True)
class ThresholdSchedule:
    """Thresholds on a PPP grid, linearly interpolated in log PPP and held flat beyond the ends."""

    ppps: np.ndarray
    values: np.ndarray
    cost_of_time: float = 0.0

    def __post_init__(self):
        ppps = np.atleast_1d(np.asarray(self.ppps, dtype=np.float64))
        values = np.atleast_1d(np.asarray(self.values, dtype=np.float64))
        if ppps.ndim != 1 or ppps.size == 0 or ppps.shape != values.shape:
            raise DecisionError(f"schedule needs matching non-empty grids, got {ppps.shape} and {values.shape}")
        if np.any(ppps <= 0) or np.any(np.diff(ppps) <= 0):
            raise DecisionError("schedule PPPs must be positive and strictly ascending")
        if np.any(np.isnan(values)):
            raise DecisionError("schedule thresholds must not be NaN")
        object.__setattr__(self, "ppps", ppps)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, tau: float, ppps=None, cost_of_time: float = 0.0) -> "ThresholdSchedule":
        if ppps is None:
            return cls(np.array([1.0]), np.array([float(tau)]), cost_of_time)
        ppps = np.asarray(ppps, dtype=np.float64)
        return cls(ppps, np.full(ppps.shape, float(tau)), cost_of_time)

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.values == self.values[0]))

    def at(self, ppp) -> np.ndarray:
        ppp = np.asarray(ppp, dtype=np.float64)
        if self.values.size == 1:
            return np.full(ppp.shape, self.values[0])
        log_ppp = np.log(np.maximum(ppp, self.ppps[0]))
        return np.interp(log_ppp, np.log(self.ppps), self.values)


@dataclass(frozen=True)
class DecisionTrace:
    log_ratio_trajectory: np.ndarray
    query_ppps: np.ndarray
    stop_ppp: float
    declared_class: int
    true_class: int | None
    stopped_by: StopReason
    regime: Regime

    @property
    def correct(self) -> bool:
        return self.true_class is not None and self.declared_class == self.true_class


def error_bound(tau: float) -> float:
    """Upper bound on SPRT error at threshold ``tau``: 1 - Sigm(tau)."""
    return float(expit(-tau))


def query_bins(query_ppps: Sequence[float], max_ppp: float, ppp_per_bin: float) -> np.ndarray:
    """Stream bins for an FR run: the queries at or below ``max_ppp`` plus the cutoff bin.

    The cutoff is the last whole bin not past ``max_ppp``.
    """
    query_ppps = np.asarray(query_ppps, dtype=np.float64)
    if query_ppps.size == 0:
        raise DecisionError("query grid is empty")
    if np.any(np.diff(query_ppps) < 0):
        raise DecisionError("query PPPs must be ascending")
    if max_ppp <= 0 or query_ppps[0] <= 0:
        raise DecisionError("query PPPs and max_ppp must be > 0")
    if query_ppps[-1] > max_ppp * (1 + 1e-9):
        raise DecisionError(f"query PPP {query_ppps[-1]} beyond max_ppp {max_ppp}")
    bins = np.maximum(np.rint(query_ppps / ppp_per_bin).astype(np.int64), 1)
    cutoff = max(int(math.floor(max_ppp / ppp_per_bin * (1 + 1e-9))), 1)
    return np.unique(np.append(bins[bins <= cutoff], cutoff))


def _check_stream(stream: PhotonStream, last_bin: int):
    if stream.num_bins == 0:
        raise DecisionError("stream is empty")
    if last_bin > stream.num_bins:
        raise DecisionError(f"stream has {stream.num_bins} bins, query needs {last_bin}")


def read_queries(stream: PhotonStream, bins: np.ndarray, noise: NoiseConfig, seed: int, example: int) -> np.ndarray:
    """Readout-corrupted accumulated counts at each bin, (Q, H, W, C)."""
    _check_stream(stream, int(bins[-1]))
    return np.stack([
        readout(accumulate(stream, int(b)), stream, noise, make_rng(seed, Purpose.READOUT, example, int(b))).counts
        for b in bins
    ])


def stream_log_ratios(stream, classifier, bins, noise, seed, example) -> np.ndarray:
    counts = read_queries(stream, bins, noise, seed, example)
    return classifier.log_ratios(counts, bins * stream.ppp_per_bin)


def first_crossing(smax: np.ndarray, taus: np.ndarray) -> int | None:
    crossed = np.flatnonzero(smax > taus)
    return int(crossed[0]) if crossed.size else None


def _trace(ratios, ppps, stop, by, regime, label) -> DecisionTrace:
    return DecisionTrace(
        log_ratio_trajectory=ratios[: stop + 1],
        query_ppps=ppps[: stop + 1],
        stop_ppp=float(ppps[stop]),
        declared_class=int(np.argmax(ratios[stop])),
        true_class=label,
        stopped_by=by,
        regime=regime,
    )


def decide_fr(
    stream: PhotonStream,
    classifier,
    schedule: ThresholdSchedule,
    query_ppps: Sequence[float],
    max_ppp: float,
    noise: NoiseConfig,
    seed: int = 0,
    example: int = 0,
) -> DecisionTrace:
    bins = query_bins(query_ppps, max_ppp, stream.ppp_per_bin)
    ratios = stream_log_ratios(stream, classifier, bins, noise, seed, example)
    ppps = np.minimum(bins * stream.ppp_per_bin, max_ppp)
    stop = first_crossing(ratios.max(axis=1), schedule.at(ppps))
    if stop is None:
        return _trace(ratios, ppps, len(bins) - 1, StopReason.CUTOFF, Regime.FR, stream.source_label)
    return _trace(ratios, ppps, stop, StopReason.THRESHOLD, Regime.FR, stream.source_label)


def decide_int(stream: PhotonStream, classifier, ppp: float, noise: NoiseConfig, seed: int = 0, example: int = 0) -> DecisionTrace:
    if ppp < 0:
        raise DecisionError(f"ppp must be >= 0, got {ppp}")
    bins = np.array([int(round(ppp / stream.ppp_per_bin))])
    ratios = stream_log_ratios(stream, classifier, bins, noise, seed, example)
    return _trace(ratios, bins * stream.ppp_per_bin, 0, StopReason.CUTOFF, Regime.INT, stream.source_label)


@dataclass(frozen=True)
class Trajectories:
    """Log ratios of every example at every query bin, computed once and reused per threshold."""

    log_ratios: np.ndarray  # (N, Q, K)
    bins: np.ndarray
    ppps: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.log_ratios.shape[0])

    @property
    def max_log_ratios(self) -> np.ndarray:
        return self.log_ratios.max(axis=2)

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.log_ratios, axis=2)

    @property
    def errors(self) -> np.ndarray:
        """1 where the true class is not the unique argmax at that query."""
        top = self.max_log_ratios
        true = np.take_along_axis(self.log_ratios, self.labels[:, None, None], axis=2)[..., 0]
        ties = np.sum(self.log_ratios == top[..., None], axis=2) > 1
        return ((true < top) | ties).astype(np.int8)

    def column(self, ppp: float) -> int:
        matches = np.flatnonzero(np.isclose(self.ppps, ppp, rtol=1e-9, atol=1e-12))
        if matches.size == 0:
            raise DecisionError(f"PPP {ppp} is not on the evaluated grid")
        return int(matches[0])


def evaluate_streams(
    data: ImageSet,
    classifier,
    noise: NoiseConfig,
    bins: np.ndarray,
    seed: int,
    workers: int = 1,
) -> Trajectories:
    """Simulates one stream per example and records its log ratios at ``bins``."""
    if len(data) == 0:
        raise DecisionError("dataset is empty")
    bins = np.asarray(bins, dtype=np.int64)
    num_bins = max(int(bins[-1]), 1)

    def run(i: int) -> np.ndarray:
        stream = simulate_stream(data.image(i), noise, num_bins, make_rng(seed, Purpose.STREAM, i))
        return stream_log_ratios(stream, classifier, bins, noise, seed, i)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            ratios = list(pool.map(run, range(len(data))))
    else:
        ratios = [run(i) for i in range(len(data))]
    logger.info(f"Evaluated {len(data)} streams at {bins.size} query bins with {classifier.name}")
    return Trajectories(np.stack(ratios), bins, bins * noise.ppp_per_bin, np.asarray(data.labels, dtype=np.int64))


@dataclass(frozen=True)
class Outcomes:
    stop_index: np.ndarray
    stop_ppp: np.ndarray
    declared: np.ndarray
    correct: np.ndarray
    crossed: np.ndarray


def fr_outcomes(traj: Trajectories, schedule: ThresholdSchedule) -> Outcomes:
    """Vectorized FR decisions for every example; the last query is the cutoff."""
    crossed = traj.max_log_ratios > schedule.at(traj.ppps)[None, :]
    any_cross = crossed.any(axis=1)
    stop = np.where(any_cross, np.argmax(crossed, axis=1), traj.ppps.size - 1)
    declared = traj.predictions[np.arange(len(traj)), stop]
    return Outcomes(stop, traj.ppps[stop], declared, declared == traj.labels, any_cross)


def int_outcomes(traj: Trajectories, ppp: float) -> Outcomes:
    column = traj.column(ppp)
    stop = np.full(len(traj), column)
    declared = traj.predictions[:, column]
    return Outcomes(stop, traj.ppps[stop], declared, declared == traj.labels, np.zeros(len(traj), dtype=bool))


def _sat_row(regime: Regime, label: float, outcomes: Outcomes, rng, resamples: int) -> dict:
    errors = (~outcomes.correct).astype(np.float64)
    return {
        "regime": regime.value,
        "threshold_or_ppp": label,
        "median_ppp": float(np.median(outcomes.stop_ppp)),
        "mean_ppp": float(np.mean(outcomes.stop_ppp)),
        "error_rate": float(errors.mean()),
        "median_ppp_se": bootstrap_se(outcomes.stop_ppp, np.median, rng, resamples),
        "error_se": bootstrap_se(errors, np.mean, rng, resamples),
        "n_examples": int(errors.size),
    }


def sat_sweep(
    traj: Trajectories,
    regime: Regime | str,
    values: Sequence[float | ThresholdSchedule],
    seed: int = 0,
    resamples: int = DEFAULT_RESAMPLES,
) -> pd.DataFrame:
    """One row per threshold (FR) or fixed PPP (INT).

    FR values may be plain thresholds or whole schedules; a schedule row is
    labeled with its cost of time.
    """
    regime = Regime(regime)
    if len(traj) == 0:
        raise DecisionError("no examples to sweep")
    rows = []
    for i, value in enumerate(values):
        rng = make_rng(seed, Purpose.BOOTSTRAP, i)
        if regime is Regime.FR:
            schedule = value if isinstance(value, ThresholdSchedule) else ThresholdSchedule.constant(value)
            label = schedule.cost_of_time if isinstance(value, ThresholdSchedule) else float(value)
            rows.append(_sat_row(regime, label, fr_outcomes(traj, schedule), rng, resamples))
        else:
            rows.append(_sat_row(regime, float(value), int_outcomes(traj, float(value)), rng, resamples))
    return pd.DataFrame(rows, columns=SAT_COLUMNS)


def traces(traj: Trajectories, schedule: ThresholdSchedule) -> list[DecisionTrace]:
    """Per-example FR traces rebuilt from stored trajectories."""
    out = fr_outcomes(traj, schedule)
    return [
        _trace(
            traj.log_ratios[n],
            traj.ppps,
            int(out.stop_index[n]),
            StopReason.THRESHOLD if out.crossed[n] else StopReason.CUTOFF,
            Regime.FR,
            int(traj.labels[n]),
        )
        for n in range(len(traj))
    ]
