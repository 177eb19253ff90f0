import math

import numpy as np

from scotopic.tools.stats import bootstrap_se


def test_bootstrap_se_of_mean_matches_theory():
    values = np.random.default_rng(0).normal(0.0, 1.0, size=400)
    se = bootstrap_se(values, np.mean, np.random.default_rng(1), resamples=2000)
    expected = values.std() / math.sqrt(values.size)
    assert abs(se - expected) < 0.1 * expected


def test_bootstrap_se_constant_values():
    assert bootstrap_se(np.full(10, 3.0), np.median, np.random.default_rng(0), resamples=100) == 0.0


def test_bootstrap_se_degenerate_inputs():
    assert math.isnan(bootstrap_se(np.array([]), np.mean, np.random.default_rng(0)))
    assert bootstrap_se(np.ones(3), np.mean, np.random.default_rng(0), resamples=1) == 0.0


def test_bootstrap_se_is_reproducible():
    values = np.arange(20.0)
    a = bootstrap_se(values, np.median, np.random.default_rng(5), resamples=300)
    b = bootstrap_se(values, np.median, np.random.default_rng(5), resamples=300)
    assert a == b
