"""Mini-batch SGD training for the adapted network and the baselines.

Every epoch renders each training image at ``exposures_per_image`` PPPs
(stratified log-uniform over ``ppp_range``) with fresh photon and readout
noise, so no low-light dataset is ever stored.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from scotopic.errors import ModelError, TrainingDivergedError
from scotopic.models.network import AdaptedNetwork, Network, adapted_input, build_network
from scotopic.rng import Purpose, make_rng
from scotopic.sensor.photon_sim import NoiseConfig, pixel_rate, readout_batch, render_counts
from scotopic.tools.idx import ImageSet

logger = logging.getLogger(__name__)

MODEL_KINDS = ("waldnet", "rate", "photopic", "ensemble", "waldnet-estimated-light")
PRIOR_POOLINGS = ("pixel", "feature_map")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.004
    baseline_learning_rate: float = 0.001
    batch_size: int = 100
    epochs: int = 20
    weight_decay: float = 0.0005
    exposures_per_image: int = 4
    ppp_min: float = 0.22
    ppp_max: float = 220.0
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "baseline_learning_rate", "batch_size", "epochs", "exposures_per_image", "ppp_min"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ModelError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not self.ppp_min < self.ppp_max:
            raise ModelError(f"ppp range [{self.ppp_min}, {self.ppp_max}] is empty")
        if self.seed < 0:
            raise ModelError(f"seed must be >= 0, got {self.seed}")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "waldnet"
    architecture: str = "conv"
    conv_features: tuple[int, ...] = (8, 16)
    hidden_units: tuple[int, ...] = (128,)
    kernel_size: int = 5
    prior_pooling: str = "pixel"
    anchors: tuple[float, ...] = (0.22, 2.2, 22.0, 220.0)
    photopic_ppp: float = 220.0

    def __post_init__(self):
        object.__setattr__(self, "conv_features", tuple(int(v) for v in self.conv_features))
        object.__setattr__(self, "hidden_units", tuple(int(v) for v in self.hidden_units))
        object.__setattr__(self, "anchors", tuple(float(v) for v in self.anchors))
        if self.kind not in MODEL_KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}, expected one of {MODEL_KINDS}")
        if self.architecture not in ("conv", "mlp"):
            raise ModelError(f"unknown architecture {self.architecture!r}")
        if self.prior_pooling not in PRIOR_POOLINGS:
            raise ModelError(f"prior_pooling must be one of {PRIOR_POOLINGS}, got {self.prior_pooling!r}")
        if any(v < 1 for v in self.conv_features + self.hidden_units) or self.kernel_size < 1:
            raise ModelError("layer sizes must be >= 1")
        if not self.anchors or any(a <= 0 for a in self.anchors) or list(self.anchors) != sorted(self.anchors):
            raise ModelError(f"anchors must be positive and ascending, got {self.anchors}")
        if self.photopic_ppp <= 0:
            raise ModelError(f"photopic_ppp must be > 0, got {self.photopic_ppp}")


def sample_exposures(n: int, per_image: int, ppp_min: float, ppp_max: float, rng: np.random.Generator) -> np.ndarray:
    """(n, per_image) PPPs, one draw per equal-width stratum of [log ppp_min, log ppp_max]."""
    lo, hi = math.log(ppp_min), math.log(ppp_max)
    width = (hi - lo) / per_image
    edges = lo + width * np.arange(per_image)
    return np.exp(edges + width * rng.uniform(size=(n, per_image)))


def prior_mean(data: ImageSet, noise: NoiseConfig, pooling: str = "pixel") -> np.ndarray:
    """Per-pixel prior photon count per bin: mean training image through the pixel rate."""
    if len(data) == 0:
        raise ModelError("cannot estimate the prior mean of an empty dataset")
    mean_image = data.pixels.mean(axis=0)
    if pooling == "feature_map":
        mean_image = np.broadcast_to(mean_image.mean(axis=(0, 1), keepdims=True), mean_image.shape).copy()
    elif pooling != "pixel":
        raise ModelError(f"unknown prior pooling {pooling!r}")
    return pixel_rate(mean_image, noise) * noise.bin_width


def _check_data(data: ImageSet):
    if len(data) == 0:
        raise ModelError("training set is empty")
    if np.unique(data.labels).size < 2:
        raise ModelError("training set needs at least 2 classes")


def _sgd_update(network: Network, grads, lr: float):
    for layer, grad in zip(network.layers, grads):
        for name, value in grad.items():
            layer.params[name] -= lr * value


def adapted_loss_and_grads(net: AdaptedNetwork, counts: np.ndarray, t: np.ndarray, labels: np.ndarray, weight_decay: float = 0.0):
    """Loss, layer gradients and d loss / d log t0 for a batch of counts at bins ``t``."""
    x = adapted_input(counts, t, net)
    loss, grads, dx, logits = net.network.loss_and_grads(x, labels, weight_decay)
    t0 = net.prior_strength
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1, 1, 1)
    d_alpha = (t - net.reference_bins) / (t + t0) ** 2
    d_gamma = (net.reference_bins - t) * t / (t + t0) ** 2
    dx_dt0 = (d_alpha * counts + d_gamma * net.prior_mean[None]) * net.input_scale
    grad_log_t0 = float(np.sum(dx * dx_dt0)) * t0
    return loss, grads, grad_log_t0, logits


def _run_epochs(
    data: ImageSet,
    cfg: TrainConfig,
    noise: NoiseConfig,
    seed: int,
    draw_ppps: Callable[[int, np.random.Generator], np.ndarray],
    step: Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[float, np.ndarray]],
    describe: Callable[[], dict],
    name: str,
    history: list[dict] | None,
):
    n = len(data)
    for epoch in range(cfg.epochs):
        rng = make_rng(seed, Purpose.TRAIN, epoch)
        source = np.repeat(np.arange(n), cfg.exposures_per_image)
        ppps = draw_ppps(n, rng).reshape(-1)
        order = rng.permutation(source.size)
        total_loss, correct = 0.0, 0
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            images = data.pixels[source[batch]]
            labels = data.labels[source[batch]]
            counts = readout_batch(render_counts(images, ppps[batch], noise, rng), noise, rng)
            loss, logits = step(counts, labels, ppps[batch])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"{name}: loss became {loss} at epoch {epoch + 1}, batch starting at sample {start}")
            total_loss += loss * batch.size
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
        record = {"epoch": epoch + 1, "loss": total_loss / source.size, "accuracy": correct / source.size, **describe()}
        logger.info(f"{name} epoch {record['epoch']}/{cfg.epochs}: loss={record['loss']:.4f} accuracy={record['accuracy']:.4f}")
        if history is not None:
            history.append(record)


def _new_network(data: ImageSet, model: ModelConfig, seed: int, *keys: int) -> Network:
    rng = make_rng(seed, Purpose.INIT, *keys)
    return build_network(
        model.architecture,
        data.image_shape,
        data.num_classes,
        rng,
        conv_features=model.conv_features,
        hidden_units=model.hidden_units,
        kernel_size=model.kernel_size,
    )


def _log_uniform(cfg: TrainConfig):
    return lambda n, rng: sample_exposures(n, cfg.exposures_per_image, cfg.ppp_min, cfg.ppp_max, rng)


def train_posterior(
    data: ImageSet,
    cfg: TrainConfig,
    noise: NoiseConfig,
    seed: int | None = None,
    model: ModelConfig | None = None,
    history: list[dict] | None = None,
) -> AdaptedNetwork:
    """Trains W, b, F and t0 of the adapted network; the prior mean stays frozen."""
    _check_data(data)
    seed = cfg.seed if seed is None else seed
    model = model or ModelConfig()
    net = AdaptedNetwork(
        network=_new_network(data, model, seed),
        prior_mean=prior_mean(data, noise, model.prior_pooling),
        log_prior_strength=0.0,
        reference_bins=cfg.ppp_max / noise.ppp_per_bin,
        input_scale=1.0 / cfg.ppp_max,
    )

    def step(counts, labels, ppps):
        t = ppps / noise.ppp_per_bin
        loss, grads, grad_log_t0, logits = adapted_loss_and_grads(net, counts, t, labels, cfg.weight_decay)
        _sgd_update(net.network, grads, cfg.learning_rate)
        net.log_prior_strength -= cfg.learning_rate * grad_log_t0
        return loss, logits

    records = [] if history is None else history
    _run_epochs(data, cfg, noise, seed, _log_uniform(cfg), step, lambda: {"t0": net.prior_strength}, "adaptive", records)
    net.history = list(records)
    return net


def _train_plain(data, cfg, noise, seed, model, draw_ppps, to_input, name, history, *keys) -> Network:
    network = _new_network(data, model, seed, *keys)

    def step(counts, labels, ppps):
        loss, grads, _, logits = network.loss_and_grads(to_input(counts, ppps), labels, cfg.weight_decay)
        _sgd_update(network, grads, cfg.baseline_learning_rate)
        return loss, logits

    _run_epochs(data, cfg, noise, seed, draw_ppps, step, dict, name, history)
    return network


def _per_ppp(counts: np.ndarray, ppps: np.ndarray) -> np.ndarray:
    return counts / ppps.reshape(-1, 1, 1, 1)


def train_rate(
    data: ImageSet,
    cfg: TrainConfig,
    noise: NoiseConfig,
    seed: int | None = None,
    model: ModelConfig | None = None,
    history: list[dict] | None = None,
) -> Network:
    """Plain network on time-normalized counts N_t / PPP at log-uniform exposures."""
    _check_data(data)
    seed = cfg.seed if seed is None else seed
    return _train_plain(data, cfg, noise, seed, model or ModelConfig(), _log_uniform(cfg), _per_ppp, "rate", history)


def train_specialist(
    data: ImageSet,
    ppp: float,
    cfg: TrainConfig,
    noise: NoiseConfig,
    seed: int | None = None,
    model: ModelConfig | None = None,
    history: list[dict] | None = None,
    key: int = 0,
) -> Network:
    """Plain network trained only at one PPP; its input is counts / ppp."""
    _check_data(data)
    if ppp <= 0:
        raise ModelError(f"specialist PPP must be > 0, got {ppp}")
    seed = cfg.seed if seed is None else seed
    draw = lambda n, rng: np.full((n, cfg.exposures_per_image), float(ppp))
    return _train_plain(data, cfg, noise, seed, model or ModelConfig(), draw, _per_ppp, f"specialist@{ppp:g}", history, key)


def train_ensemble(
    data: ImageSet,
    ppp_anchors,
    cfg: TrainConfig,
    noise: NoiseConfig,
    seed: int | None = None,
    model: ModelConfig | None = None,
) -> list[tuple[float, Network]]:
    anchors = [float(a) for a in ppp_anchors]
    if not anchors:
        raise ModelError("ensemble needs at least one anchor PPP")
    if anchors != sorted(anchors):
        raise ModelError(f"ensemble anchors must be ascending, got {anchors}")
    return [
        (anchor, train_specialist(data, anchor, cfg, noise, seed=seed, model=model, key=i + 1))
        for i, anchor in enumerate(anchors)
    ]
