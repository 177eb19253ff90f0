from unittest.mock import patch

import numpy as np
import pytest

from scotopic.decision.sprt import ThresholdSchedule, Trajectories
from scotopic.decision.thresholds import (
    AnnealConfig,
    RiskDataset,
    bayes_risk,
    best_constant_threshold,
    hard_risk,
    load_schedule,
    objective,
    optimize,
    risk_gradient,
    save_schedule,
    soft_crossing,
    step_costs,
)
from scotopic.errors import ConfigError, DecisionError

GRID = np.array([0.22, 0.66, 2.2, 6.6, 22.0])


def _risk_data(n=60, seed=0):
    rng = np.random.default_rng(seed)
    # evidence grows with exposure; errors get rarer as it does
    smax = np.cumsum(rng.exponential(0.8, size=(n, GRID.size)), axis=1)
    errors = (rng.uniform(size=(n, GRID.size)) < 0.4 * np.exp(-np.arange(GRID.size))).astype(int)
    return RiskDataset(smax, errors, GRID)


def _enumerated_risk(data, taus, eta, sigma=None):
    """Expected cost over every possible stopping point."""
    costs = step_costs(data, eta)
    total = 0.0
    for smax, errors in zip(data.max_log_ratios, data.errors):
        if sigma is None:
            q = (smax > taus).astype(float)
        else:
            q = 1.0 / (1.0 + np.exp(-(smax - taus) / sigma))
        q[-1] = 1.0
        survive = 1.0
        for t in range(len(q)):
            stop = survive * q[t]
            total += stop * (costs[: t + 1].sum() + errors[t])
            survive *= 1.0 - q[t]
    return total / len(data)


def test_step_costs_sum_to_eta_times_ppp():
    data = _risk_data()
    assert step_costs(data, 0.01).sum() == pytest.approx(0.01 * 22.0)
    np.testing.assert_allclose(step_costs(data, 0.01, constant_step_cost=True), np.full(5, 0.01 * 0.22))


@pytest.mark.parametrize("sigma", [None, 0.3, 1.0])
def test_risk_matches_enumeration(sigma):
    data = _risk_data()
    taus = np.array([3.0, 2.5, 2.0, 1.5, 1.0])
    risk = hard_risk(data, taus, 0.01) if sigma is None else bayes_risk(data, taus, 0.01, sigma)
    assert risk == pytest.approx(_enumerated_risk(data, taus, 0.01, sigma))


def test_single_example_by_hand():
    data = RiskDataset(np.array([[0.5, 2.0, 3.0]]), np.array([[1, 0, 0]]), np.array([1.0, 2.0, 3.0]))
    # stops at the second point: cost eta * 2, no error
    assert hard_risk(data, np.full(3, 1.0), 0.1) == pytest.approx(0.2)
    # never crosses: cost eta * 3 plus the last error indicator
    assert hard_risk(data, np.full(3, 5.0), 0.1) == pytest.approx(0.3)
    # crosses immediately: cost eta * 1 plus an error
    assert hard_risk(data, np.full(3, 0.0), 0.1) == pytest.approx(1.1)


@pytest.mark.parametrize("sigma", [0.5, 0.1, 0.05])
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_gradient_matches_finite_difference(sigma, seed):
    rng = np.random.default_rng(seed)
    grid = np.geomspace(0.22, 22.0, 8)
    smax = np.cumsum(rng.exponential(0.5, size=(10, grid.size)), axis=1)
    errors = (rng.uniform(size=(10, grid.size)) < 0.3).astype(int)
    data = RiskDataset(smax, errors, grid)
    taus = rng.uniform(0.5, 3.0, size=grid.size)
    eta, weight = 0.02, 0.1
    grad = risk_gradient(data, taus, eta, sigma, weight)
    eps = 1e-6
    numeric = np.zeros_like(taus)
    for i in range(taus.size):
        up, down = taus.copy(), taus.copy()
        up[i] += eps
        down[i] -= eps
        numeric[i] = (objective(data, up, eta, sigma, weight) - objective(data, down, eta, sigma, weight)) / (2 * eps)
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-8)


@pytest.mark.parametrize("shift", [-1.5, 0.7, 4.0])
def test_risk_ignores_common_shift(shift):
    data = _risk_data(seed=4)
    shifted = RiskDataset(data.max_log_ratios + shift, data.errors, GRID)
    taus = np.array([3.0, 2.5, 2.0, 1.5, 1.0])
    assert bayes_risk(shifted, taus + shift, 0.01, 0.3) == pytest.approx(bayes_risk(data, taus, 0.01, 0.3), rel=1e-9)
    assert hard_risk(shifted, taus + shift, 0.01) == pytest.approx(hard_risk(data, taus, 0.01), rel=1e-9)


def test_optimizer_is_no_worse_than_best_constant():
    data = _risk_data(n=100, seed=2)
    _, constant_risk = best_constant_threshold(data, 0.01)
    schedule = optimize(data, 0.01, AnnealConfig(iterations=60))
    assert schedule.cost_of_time == 0.01
    np.testing.assert_array_equal(schedule.ppps, GRID)
    assert hard_risk(data, schedule, 0.01) <= constant_risk + 1e-12


def test_schedule_grid_must_match():
    data = _risk_data()
    schedule = ThresholdSchedule(np.array([1.0, 2.0]), np.array([1.0, 1.0]))
    with pytest.raises(DecisionError):
        hard_risk(data, schedule, 0.01)
    with pytest.raises(DecisionError):
        hard_risk(data, np.ones(3), 0.01)


def test_risk_dataset_from_trajectories():
    traj = Trajectories(
        log_ratios=np.array([[[1.0, -1.0], [-2.0, 2.0]]]),
        bins=np.array([1, 10]),
        ppps=np.array([0.22, 2.2]),
        labels=np.array([1]),
    )
    data = RiskDataset.from_trajectories(traj)
    np.testing.assert_array_equal(data.max_log_ratios, [[1.0, 2.0]])
    np.testing.assert_array_equal(data.errors, [[1, 0]])
    with pytest.raises(DecisionError):
        RiskDataset(np.zeros((1, 2)), np.full((1, 2), 0.5), np.array([1.0, 2.0]))


def test_anneal_config_validation():
    assert AnnealConfig().temperature(10_000) == pytest.approx(0.01)
    with pytest.raises(ConfigError):
        AnnealConfig(decay=1.5)
    with pytest.raises(ConfigError):
        AnnealConfig(floor=1.0, initial_temperature=0.5)


def test_schedule_file_round_trip(tmp_path):
    schedule = ThresholdSchedule(GRID, np.array([3.1, 2.7, 2.2, 1.9, 1.5]), cost_of_time=0.001)
    path = str(tmp_path / "schedules" / "eta_0.001.csv")
    save_schedule(path, schedule, {"model": "waldnet"})
    with open(path) as f:
        assert f.readline() == "# eta=0.001\n"
    restored = load_schedule(path)
    np.testing.assert_allclose(restored.ppps, schedule.ppps)
    np.testing.assert_allclose(restored.values, schedule.values)
    assert restored.cost_of_time == 0.001


def test_soft_crossing():
    assert soft_crossing(1.0, 1.0, 0.5) == pytest.approx(0.5)
    assert soft_crossing(3.0, 1.0, 0.01) == pytest.approx(1.0)
    with pytest.raises(DecisionError):
        soft_crossing(1.0, 1.0, 0.0)


def test_soft_risk_goes_through_soft_crossing():
    data = _risk_data()
    taus = np.array([3.0, 2.5, 2.0, 1.5, 1.0])
    with patch("scotopic.decision.thresholds.soft_crossing", wraps=soft_crossing) as crossing:
        risk = bayes_risk(data, taus, 0.01, 0.3)
    crossing.assert_called_once()
    assert risk == pytest.approx(_enumerated_risk(data, taus, 0.01, 0.3))
