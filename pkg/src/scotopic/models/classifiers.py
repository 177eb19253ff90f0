"""Classifiers queried by the decision layer.

All of them map a batch of count images and the PPP each was collected at to
class logits; log posterior ratios and ClassPosterior objects are derived
from the logits the same way for every model.
"""

from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np

from scotopic.errors import ModelError
from scotopic.models.network import (
    AdaptedNetwork,
    ClassPosterior,
    Network,
    adapted_logits,
    log_ratios_from_logits,
    posterior_from_logits,
)
from scotopic.sensor.light_estimator import LightEstimator, equivalent_time, estimate_ppp
from scotopic.sensor.photon_sim import CountImage

logger = logging.getLogger(__name__)


def _batch(counts: np.ndarray, ppps) -> tuple[np.ndarray, np.ndarray]:
    counts = np.asarray(counts, dtype=np.float64)
    ppps = np.broadcast_to(np.asarray(ppps, dtype=np.float64), (counts.shape[0],))
    if np.any(ppps < 0):
        raise ModelError("PPP must be >= 0")
    return counts, ppps


def _scale(values: np.ndarray) -> np.ndarray:
    return values.reshape(-1, 1, 1, 1)


class Classifier:
    """Base: subclasses implement ``logits(counts, ppps)`` for (Q, H, W, C) counts."""

    name = "classifier"

    @property
    def network(self) -> Network:
        raise NotImplementedError

    def logits(self, counts: np.ndarray, ppps) -> np.ndarray:
        raise NotImplementedError

    def log_ratios(self, counts: np.ndarray, ppps) -> np.ndarray:
        return log_ratios_from_logits(self.logits(counts, ppps))

    def posterior(self, counts: CountImage) -> ClassPosterior:
        return posterior_from_logits(self.logits(counts.counts[None], counts.ppp)[0])

    def dense_multiplications(self) -> int:
        return self.network.dense_multiplications()


class AdaptiveClassifier(Classifier):
    name = "waldnet"

    def __init__(self, net: AdaptedNetwork):
        self.net = net

    @property
    def network(self) -> Network:
        return self.net.network

    def logits(self, counts, ppps):
        counts, ppps = _batch(counts, ppps)
        return adapted_logits(counts, ppps / self.net.ppp_per_bin, self.net)

    def dense_multiplications(self) -> int:
        # alpha * N and gamma * mu on every input element
        return self.network.dense_multiplications() + 2 * int(np.prod(self.network.input_shape))


class EstimatedLightClassifier(AdaptiveClassifier):
    """Adapted network driven by an estimated PPP instead of the true exposure."""

    name = "waldnet-estimated-light"

    def __init__(self, net: AdaptedNetwork, estimator: LightEstimator):
        super().__init__(net)
        self.estimator = estimator

    def logits(self, counts, ppps):
        counts, _ = _batch(counts, ppps)
        estimated = np.array([estimate_ppp(self.estimator, c) for c in counts])
        t_hat = np.array([equivalent_time(p, 1.0, self.net.ppp_per_bin) for p in estimated])
        return adapted_logits(counts, t_hat, self.net)


class RateClassifier(Classifier):
    name = "rate"

    def __init__(self, network: Network):
        self._network = network

    @property
    def network(self) -> Network:
        return self._network

    def logits(self, counts, ppps):
        counts, ppps = _batch(counts, ppps)
        if np.any(ppps <= 0):
            raise ModelError("rate classifier needs t >= 1")
        return self._network.forward(counts / _scale(ppps))


class PhotopicClassifier(Classifier):
    """Specialist trained at ``ppp`` (normal light) applied to rescaled low-light counts."""

    name = "photopic"

    def __init__(self, network: Network, ppp: float = 220.0):
        self._network = network
        self.ppp = float(ppp)

    @property
    def network(self) -> Network:
        return self._network

    def logits(self, counts, ppps):
        counts, ppps = _batch(counts, ppps)
        if np.any(ppps <= 0):
            raise ModelError("photopic classifier needs t >= 1")
        rescaled = counts * _scale(self.ppp / ppps)
        return self._network.forward(rescaled / self.ppp)


def route(ppp: float, anchors: Sequence[float]) -> int:
    """Index of the anchor nearest ``ppp`` in log scale; ties go to the lower anchor."""
    if not anchors:
        raise ModelError("ensemble is empty")
    if ppp <= 0:
        return 0
    distances = np.abs(math.log(ppp) - np.log(np.asarray(anchors, dtype=np.float64)))
    return int(np.flatnonzero(distances <= distances.min() + 1e-12)[0])


class EnsembleClassifier(Classifier):
    name = "ensemble"

    def __init__(self, members: Sequence[tuple[float, Network]]):
        if not members:
            raise ModelError("ensemble is empty")
        anchors = [float(ppp) for ppp, _ in members]
        if anchors != sorted(anchors):
            raise ModelError(f"ensemble anchors must be ascending, got {anchors}")
        self.members = [(float(ppp), net) for ppp, net in members]

    @property
    def anchors(self) -> list[float]:
        return [ppp for ppp, _ in self.members]

    @property
    def network(self) -> Network:
        return self.members[0][1]

    def logits(self, counts, ppps):
        counts, ppps = _batch(counts, ppps)
        chosen = np.array([route(p, self.anchors) for p in ppps], dtype=np.int64)
        out = None
        for index in np.unique(chosen):
            anchor, network = self.members[index]
            rows = chosen == index
            # Count-space rescaling to the anchor's expected total; zero exposure stays blank.
            factor = np.divide(anchor, ppps[rows], out=np.zeros(int(rows.sum())), where=ppps[rows] > 0)
            logits = network.forward(counts[rows] * _scale(factor) / anchor)
            if out is None:
                out = np.empty((counts.shape[0], logits.shape[1]))
            out[rows] = logits
        return out


def forward_rate(counts: CountImage, network: Network) -> ClassPosterior:
    if counts.num_bins < 1 or counts.ppp <= 0:
        raise ModelError("forward_rate needs t >= 1")
    return RateClassifier(network).posterior(counts)


def forward_photopic(counts: CountImage, specialist: Network, ppp: float = 220.0) -> ClassPosterior:
    if counts.num_bins < 1 or counts.ppp <= 0:
        raise ModelError("forward_photopic needs t >= 1")
    return PhotopicClassifier(specialist, ppp).posterior(counts)


def forward_ensemble(counts: CountImage, ensemble: Sequence[tuple[float, Network]]) -> ClassPosterior:
    return EnsembleClassifier(ensemble).posterior(counts)
