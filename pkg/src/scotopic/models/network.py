"""Feed-forward networks and the exposure-adaptive first layer.

The adapted first layer computes ``alpha(t) * W N_t + beta(t)``. Because the
layer is linear this equals a plain forward pass on the posterior-expected
full-exposure image ``alpha(t) * N_t + gamma(t) * mu`` with
``gamma(t) = t0 (T - t) / (t + t0)``; the implementation uses that form so the
same layer code serves both paths and gradients reach W, b and t0.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from scotopic.errors import ModelError
from scotopic.models.layers import Dense, Flatten, Layer, MaxPool2D, ReLU, he_conv, he_dense
from scotopic.sensor.photon_sim import CountImage

logger = logging.getLogger(__name__)

# log((1 - 1e-12) / 1e-12): log-ratios are clipped as if p were clamped to [1e-12, 1 - 1e-12].
LOG_RATIO_LIMIT = math.log((1.0 - 1e-12) / 1e-12)


class Network:
    """Ordered layers ending in a linear layer whose outputs are class logits."""

    def __init__(self, layers: Sequence[Layer], input_shape: tuple[int, ...]):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        if not self.layers or not self.layers[-1].is_linear:
            raise ModelError("network must end with a linear (dense) layer")
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))
        if len(self.shapes[-1]) != 1:
            raise ModelError(f"network output must be a vector, got shape {self.shapes[-1]}")
        self.first_linear = next(i for i, layer in enumerate(self.layers) if layer.is_linear)
        if any(layer.kind != "flatten" for layer in self.layers[: self.first_linear]):
            raise ModelError("only a flatten may precede the first linear layer")

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def first_layer(self) -> Layer:
        return self.layers[self.first_linear]

    @property
    def hidden_size(self) -> int:
        return int(np.prod(self.shapes[self.first_linear + 1]))

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def check_input(self, x: np.ndarray):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ModelError(f"input shape {tuple(x.shape[1:])} does not match network input {self.input_shape}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.check_input(x)
        for layer in self.layers:
            x, _ = layer.forward(x)
        return x

    def forward_with_caches(self, x: np.ndarray):
        self.check_input(x)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, dy: np.ndarray, caches) -> tuple[np.ndarray, list[dict[str, np.ndarray]]]:
        grads: list[dict[str, np.ndarray]] = [None] * len(self.layers)
        for i in reversed(range(len(self.layers))):
            dy, grads[i] = self.layers[i].backward(dy, caches[i])
        return dy, grads

    def first_linear_map(self, x: np.ndarray) -> np.ndarray:
        """W x for a batch of input images (no bias)."""
        for layer in self.layers[: self.first_linear]:
            x, _ = layer.forward(x)
        return self.first_layer.linear(x)

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray, weight_decay: float = 0.0):
        """Mean negative log-likelihood plus L2 decay on weights (not biases)."""
        logits, caches = self.forward_with_caches(x)
        n = x.shape[0]
        log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
        nll = -log_probs[np.arange(n), labels].mean()
        decay = 0.5 * weight_decay * sum(float(np.sum(layer.params["W"] ** 2)) for layer in self.layers if layer.is_linear)
        dlogits = np.exp(log_probs)
        dlogits[np.arange(n), labels] -= 1.0
        dx, grads = self.backward(dlogits / n, caches)
        if weight_decay:
            for layer, grad in zip(self.layers, grads):
                if layer.is_linear:
                    grad["W"] = grad["W"] + weight_decay * layer.params["W"]
        return nll + decay, grads, dx, logits

    def dense_multiplications(self) -> int:
        return sum(layer.multiplications(shape) for layer, shape in zip(self.layers, self.shapes))


def build_network(
    architecture: str,
    input_shape: tuple[int, int, int],
    num_classes: int,
    rng: np.random.Generator,
    conv_features: Sequence[int] = (8, 16),
    hidden_units: Sequence[int] = (128,),
    kernel_size: int = 5,
) -> Network:
    """He-initialized network. ``conv`` stacks conv/relu/pool blocks, ``mlp`` is fully connected."""
    layers: list[Layer] = []
    shape = tuple(input_shape)
    if architecture == "conv":
        for features in conv_features:
            conv = he_conv(rng, kernel_size, shape[2], features)
            layers += [conv, ReLU(), MaxPool2D()]
            shape = MaxPool2D().output_shape(conv.output_shape(shape))
    elif architecture != "mlp":
        raise ModelError(f"unknown architecture {architecture!r}")
    layers.append(Flatten())
    width = int(np.prod(shape))
    for units in hidden_units:
        layers += [he_dense(rng, width, units), ReLU()]
        width = units
    layers.append(he_dense(rng, width, num_classes))
    return Network(layers, input_shape)


@dataclass(frozen=True)
class ClassPosterior:
    probabilities: np.ndarray
    log_ratios: np.ndarray

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.log_ratios))


def log_ratios_from_logits(logits: np.ndarray) -> np.ndarray:
    """S_c = log p_c - log(1 - p_c), computed from logits, clipped at ±LOG_RATIO_LIMIT."""
    logits = np.atleast_2d(logits)
    k = logits.shape[1]
    others = np.where(np.eye(k, dtype=bool)[None], -np.inf, logits[:, None, :])
    ratios = logits - logsumexp(others, axis=2)
    return np.clip(ratios, -LOG_RATIO_LIMIT, LOG_RATIO_LIMIT)


def posterior_from_logits(logits: np.ndarray) -> ClassPosterior:
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    probabilities = np.exp(logits - logsumexp(logits))
    return ClassPosterior(probabilities=probabilities, log_ratios=log_ratios_from_logits(logits)[0])


@dataclass
class AdaptedNetwork:
    """Plain network plus the prior that adapts its first layer to exposure.

    ``prior_mean`` is the per-pixel prior photon count per bin (mu);
    ``reference_bins`` is T; ``input_scale`` maps counts to the network's
    input units (1 / PPP at T), applied to N_t and mu alike.
    """

    network: Network
    prior_mean: np.ndarray
    log_prior_strength: float
    reference_bins: float
    input_scale: float
    history: list[dict] = field(default_factory=list, compare=False)

    def __post_init__(self):
        if self.reference_bins <= 0:
            raise ModelError(f"reference exposure T must be > 0, got {self.reference_bins}")
        if self.input_scale <= 0:
            raise ModelError(f"input_scale must be > 0, got {self.input_scale}")
        if tuple(self.prior_mean.shape) != self.network.input_shape:
            raise ModelError(f"prior mean shape {self.prior_mean.shape} does not match input {self.network.input_shape}")
        if not math.isfinite(self.log_prior_strength):
            raise ModelError("prior strength must be finite and positive")

    @property
    def prior_strength(self) -> float:
        return math.exp(self.log_prior_strength)

    @property
    def ppp_per_bin(self) -> float:
        """PPP of one bin at the training illuminance, since PPP(T) = 1 / input_scale."""
        return 1.0 / (self.input_scale * self.reference_bins)

    @property
    def first_layer_weights(self) -> np.ndarray:
        return self.network.first_layer.params["W"]

    @property
    def first_layer_bias(self) -> np.ndarray:
        return self.network.first_layer.params["b"]


def _check_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ModelError("exposure t must be >= 0")
    return t


def alpha(t, net: AdaptedNetwork):
    t = _check_time(t)
    t0 = net.prior_strength
    value = (net.reference_bins + t0) / (t + t0)
    return float(value) if value.ndim == 0 else value


def gamma(t, net: AdaptedNetwork):
    """Weight of the prior mean in the adapted input: t0 (T - t) / (t + t0)."""
    t = _check_time(t)
    t0 = net.prior_strength
    value = t0 * (net.reference_bins - t) / (t + t0)
    return float(value) if value.ndim == 0 else value


def beta(t: float, net: AdaptedNetwork) -> np.ndarray:
    """Adapted first-layer bias; shaped like the first layer's output."""
    prior = (net.prior_mean * net.input_scale)[None]
    return gamma(t, net) * net.network.first_linear_map(prior)[0] + net.first_layer_bias


def adapted_input(counts: np.ndarray, t, net: AdaptedNetwork) -> np.ndarray:
    """alpha(t) N_t + gamma(t) mu in input units, for a batch (N, H, W, C)."""
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (counts.shape[0],))
    a = np.asarray(alpha(t, net)).reshape(-1, 1, 1, 1)
    g = np.asarray(gamma(t, net)).reshape(-1, 1, 1, 1)
    return (a * counts + g * net.prior_mean[None]) * net.input_scale


def adapted_logits(counts: np.ndarray, t, net: AdaptedNetwork) -> np.ndarray:
    net.network.check_input(counts)
    return net.network.forward(adapted_input(counts, t, net))


def first_layer_adapted(counts: np.ndarray, t, net: AdaptedNetwork) -> np.ndarray:
    """Pre-nonlinearity first-layer features S^H(N_t) for a batch."""
    layer = net.network.first_layer
    x = adapted_input(counts, t, net)
    for pre in net.network.layers[: net.network.first_linear]:
        x, _ = pre.forward(x)
    return layer.linear(x) + layer.params["b"]


def forward_adapted(counts: CountImage, net: AdaptedNetwork) -> ClassPosterior:
    logits = adapted_logits(counts.counts[None].astype(np.float64), counts.num_bins, net)
    return posterior_from_logits(logits[0])


def forward_plain(x: np.ndarray, network: Network) -> ClassPosterior:
    """Unadapted forward pass on a single input already in network units."""
    return posterior_from_logits(network.forward(x[None].astype(np.float64))[0])
