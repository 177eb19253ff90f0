"""Learning a time-varying threshold schedule by minimizing Bayes risk.

For one example with grid crossings q_t and wrong-answer indicators e_t the
risk of the stopping rule obeys the backward recursion

    R_t = c_t + q_t e_t + (1 - q_t) R_{t+1},    R_last = c_last + e_last

where c_t is the time cost of reaching grid point t. Replacing the hard
crossing indicator with a sigmoid of temperature sigma makes the mean risk
differentiable in the thresholds; sigma is annealed towards a floor.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import expit

from scotopic.decision.sprt import ThresholdSchedule, Trajectories
from scotopic.errors import ConfigError, DecisionError, ThresholdDivergedError

logger = logging.getLogger(__name__)

HARD_SIGMA = 1e-6
CONSTANT_SWEEP_POINTS = 50


@dataclass(frozen=True)
class RiskDataset:
    """Per-example max log ratios and error indicators on a shared PPP grid."""

    max_log_ratios: np.ndarray  # (N, Q)
    errors: np.ndarray  # (N, Q) in {0, 1}
    ppps: np.ndarray  # (Q,)
    bin_width: float = 0.22

    def __post_init__(self):
        smax = np.atleast_2d(np.asarray(self.max_log_ratios, dtype=np.float64))
        errors = np.atleast_2d(np.asarray(self.errors, dtype=np.float64))
        ppps = np.atleast_1d(np.asarray(self.ppps, dtype=np.float64))
        if smax.shape != errors.shape or smax.shape[1] != ppps.size:
            raise DecisionError(f"risk data shapes disagree: S {smax.shape}, e {errors.shape}, grid {ppps.shape}")
        if not np.all((errors == 0) | (errors == 1)):
            raise DecisionError("error indicators must be 0 or 1")
        object.__setattr__(self, "max_log_ratios", smax)
        object.__setattr__(self, "errors", errors)
        object.__setattr__(self, "ppps", ppps)

    def __len__(self) -> int:
        return int(self.max_log_ratios.shape[0])

    @classmethod
    def from_trajectories(cls, traj: Trajectories, bin_width: float = 0.22) -> "RiskDataset":
        return cls(traj.max_log_ratios, traj.errors, traj.ppps, bin_width)


@dataclass(frozen=True)
class AnnealConfig:
    initial_temperature: float = 0.5
    decay: float = 0.99
    floor: float = 0.01
    iterations: int = 500
    smoothness_weight: float = 0.01
    step_size: float = 0.05
    constant_step_cost: bool = False

    def __post_init__(self):
        if not 0 < self.floor <= self.initial_temperature:
            raise ConfigError(f"need 0 < floor <= initial_temperature, got {self.floor}, {self.initial_temperature}")
        if not 0 < self.decay < 1:
            raise ConfigError(f"decay must be in (0, 1), got {self.decay}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.smoothness_weight < 0 or self.step_size <= 0:
            raise ConfigError("smoothness_weight must be >= 0 and step_size > 0")

    def temperature(self, k: int) -> float:
        return max(self.floor, self.initial_temperature * self.decay**k)


def soft_crossing(s_max, tau, sigma: float):
    if sigma <= 0:
        raise DecisionError(f"sigma must be > 0, got {sigma}")
    return expit((np.asarray(s_max) - np.asarray(tau)) / sigma)


def step_costs(data: RiskDataset, eta: float, constant_step_cost: bool = False) -> np.ndarray:
    """Cost of reaching each grid point; by default eta times the PPP increment, so costs sum to eta * PPP."""
    if constant_step_cost:
        return np.full(data.ppps.size, eta * data.bin_width)
    return eta * np.diff(data.ppps, prepend=0.0)


def _thresholds(data: RiskDataset, schedule: ThresholdSchedule | np.ndarray) -> np.ndarray:
    if isinstance(schedule, ThresholdSchedule):
        if schedule.values.size > 1 and (schedule.ppps.size != data.ppps.size or not np.allclose(schedule.ppps, data.ppps)):
            raise DecisionError("schedule grid does not match the risk data grid")
        return schedule.at(data.ppps)
    values = np.asarray(schedule, dtype=np.float64)
    if values.shape != data.ppps.shape:
        raise DecisionError(f"{values.size} thresholds for a {data.ppps.size}-point grid")
    return values


def _crossings(data: RiskDataset, taus: np.ndarray, sigma: float):
    """(q, q(1-q)) per example and grid point; the hard limit below HARD_SIGMA."""
    if sigma <= HARD_SIGMA:
        q = (data.max_log_ratios > taus[None, :]).astype(np.float64)
        return q, np.zeros_like(q)
    q = soft_crossing(data.max_log_ratios, taus[None, :], sigma)
    return q, q * (1.0 - q)


def _recursion(data: RiskDataset, q: np.ndarray, costs: np.ndarray) -> np.ndarray:
    """R_t for every example and grid point, (N, Q)."""
    e = data.errors
    risks = np.empty_like(q)
    risks[:, -1] = costs[-1] + e[:, -1]
    for t in range(q.shape[1] - 2, -1, -1):
        risks[:, t] = costs[t] + q[:, t] * e[:, t] + (1.0 - q[:, t]) * risks[:, t + 1]
    return risks


def bayes_risk(data: RiskDataset, schedule, eta: float, sigma: float, constant_step_cost: bool = False) -> float:
    """Mean R_0 over examples; with sigma <= 1e-6 crossings are hard (S > tau)."""
    q, _ = _crossings(data, _thresholds(data, schedule), sigma)
    return float(_recursion(data, q, step_costs(data, eta, constant_step_cost))[:, 0].mean())


def hard_risk(data: RiskDataset, schedule, eta: float, constant_step_cost: bool = False) -> float:
    return bayes_risk(data, schedule, eta, HARD_SIGMA, constant_step_cost)


def smoothness_penalty(values: np.ndarray, weight: float) -> float:
    return float(weight * np.sum(np.diff(values) ** 2))


def objective(data: RiskDataset, schedule, eta: float, sigma: float, smoothness_weight: float = 0.0, constant_step_cost: bool = False) -> float:
    taus = _thresholds(data, schedule)
    return bayes_risk(data, taus, eta, sigma, constant_step_cost) + smoothness_penalty(taus, smoothness_weight)


def risk_gradient(
    data: RiskDataset,
    schedule,
    eta: float,
    sigma: float,
    smoothness_weight: float = 0.0,
    constant_step_cost: bool = False,
) -> np.ndarray:
    """Gradient of ``objective`` with respect to the threshold at each grid point."""
    if sigma <= 0:
        raise DecisionError(f"sigma must be > 0, got {sigma}")
    taus = _thresholds(data, schedule)
    q, slope = _crossings(data, taus, sigma)
    risks = _recursion(data, q, step_costs(data, eta, constant_step_cost))
    # Probability of still running when grid point t is reached.
    reach = np.cumprod(np.concatenate([np.ones((len(data), 1)), 1.0 - q[:, :-1]], axis=1), axis=1)
    d_risk_d_q = np.zeros_like(q)
    d_risk_d_q[:, :-1] = reach[:, :-1] * (data.errors[:, :-1] - risks[:, 1:])
    grad = np.mean(d_risk_d_q * (-slope / sigma), axis=0)
    diffs = np.diff(taus)
    smooth = np.zeros_like(taus)
    smooth[:-1] -= 2 * smoothness_weight * diffs
    smooth[1:] += 2 * smoothness_weight * diffs
    return grad + smooth


def best_constant_threshold(data: RiskDataset, eta: float, constant_step_cost: bool = False, points: int = CONSTANT_SWEEP_POINTS) -> tuple[float, float]:
    """(tau, hard risk) of the best of ``points`` constant thresholds spanning the observed ratios."""
    lo, hi = float(data.max_log_ratios.min()) - 1.0, float(data.max_log_ratios.max())
    best_tau, best_risk = lo, np.inf
    for tau in np.linspace(lo, hi, points):
        risk = hard_risk(data, np.full(data.ppps.size, tau), eta, constant_step_cost)
        if risk < best_risk:
            best_tau, best_risk = float(tau), risk
    return best_tau, best_risk


def initial_schedule(data: RiskDataset, eta: float, constant_step_cost: bool = False) -> ThresholdSchedule:
    tau, _ = best_constant_threshold(data, eta, constant_step_cost)
    return ThresholdSchedule.constant(tau, data.ppps, cost_of_time=eta)


def optimize(data: RiskDataset, eta: float, cfg: AnnealConfig, init: ThresholdSchedule | None = None) -> ThresholdSchedule:
    """Annealed gradient descent; returns the schedule with the lowest hard risk seen."""
    if len(data) == 0:
        raise DecisionError("risk dataset is empty")
    init = init or initial_schedule(data, eta, cfg.constant_step_cost)
    values = _thresholds(data, init).copy()
    best_values = values.copy()
    best_risk = hard_risk(data, values, eta, cfg.constant_step_cost)
    logger.info(f"Optimizing thresholds for eta={eta:g}: initial hard risk {best_risk:.5f}")

    for k in range(1, cfg.iterations + 1):
        sigma = cfg.temperature(k)
        grad = risk_gradient(data, values, eta, sigma, cfg.smoothness_weight, cfg.constant_step_cost)
        if not np.all(np.isfinite(grad)):
            raise ThresholdDivergedError(f"risk gradient became non-finite at iteration {k} (sigma={sigma:g})")
        values = values - cfg.step_size * grad
        relaxed = objective(data, values, eta, sigma, cfg.smoothness_weight, cfg.constant_step_cost)
        if np.isnan(relaxed):
            raise ThresholdDivergedError(f"relaxed risk became NaN at iteration {k} (sigma={sigma:g})")
        risk = hard_risk(data, values, eta, cfg.constant_step_cost)
        if risk < best_risk:
            best_risk, best_values = risk, values.copy()
        if k % 100 == 0:
            logger.info(f"iteration {k}: sigma={sigma:.4f} relaxed={relaxed:.5f} hard={risk:.5f} best={best_risk:.5f}")

    return ThresholdSchedule(data.ppps, best_values, cost_of_time=eta)


def save_schedule(path: str, schedule: ThresholdSchedule, metadata: dict) -> str:
    """CSV of (ppp, tau) preceded by ``# key=value`` metadata lines."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        for key, value in {"eta": schedule.cost_of_time, **metadata}.items():
            f.write(f"# {key}={value}\n")
        pd.DataFrame({"ppp": schedule.ppps, "tau": schedule.values}).to_csv(f, index=False)
    return path


def load_schedule(path: str) -> ThresholdSchedule:
    metadata = {}
    with open(path) as f:
        for line in f:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            metadata[key] = value
    frame = pd.read_csv(path, comment="#")
    return ThresholdSchedule(frame["ppp"].to_numpy(), frame["tau"].to_numpy(), float(metadata.get("eta", 0.0)))
