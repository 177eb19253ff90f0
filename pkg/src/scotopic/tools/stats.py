from typing import Callable

import numpy as np

DEFAULT_RESAMPLES = 1000


def bootstrap_se(
    values: np.ndarray,
    statistic: Callable[..., np.ndarray],
    rng: np.random.Generator,
    resamples: int = DEFAULT_RESAMPLES,
) -> float:
    """Standard error of ``statistic`` over resamples of ``values`` with replacement.

    ``statistic`` is called once on a (resamples, n) array with ``axis=1``.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    if n == 0 or resamples < 1:
        return float("nan")
    samples = values[rng.integers(0, n, size=(resamples, n))]
    return float(np.std(statistic(samples, axis=1), ddof=1)) if resamples > 1 else 0.0
