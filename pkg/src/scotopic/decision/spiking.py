"""Event-driven recurrent inference for the adapted network.

The first layer keeps membrane potentials that follow

    V(t) = r(t) V(t - s) + alpha(t) W X + l(t),   r(t) = alpha(t) / alpha(t - s),
    l(t) = beta(t) - r(t) beta(t - s),            V(0) = beta(0)

where X is the photon frame collected over the last ``s`` bins, so V(t)
equals alpha(t) W N_t + beta(t) at every step. Each linear layer emits
signed spikes of size tau_dis; the layer above sees only the reconstruction
tau_dis * (cumulative spike count) and updates its own accumulator by the
change of its (rectified, pooled) input. Multiplications are tallied as the
power proxy; additions and comparisons are free.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import pandas as pd

from scotopic.decision.sprt import (
    DecisionTrace,
    Regime,
    StopReason,
    ThresholdSchedule,
    decide_fr,
    first_crossing,
    query_bins,
)
from scotopic.errors import SpikingError
from scotopic.models.classifiers import AdaptiveClassifier
from scotopic.models.layers import Layer
from scotopic.models.network import AdaptedNetwork, alpha, beta, log_ratios_from_logits
from scotopic.rng import Purpose, make_rng
from scotopic.sensor.photon_sim import NoiseConfig, PhotonStream, simulate_stream
from scotopic.tools.idx import ImageSet

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["tau_dis", "error_rate", "median_ppp", "mult_ratio", "spikes_total"]


@dataclass
class SpikeBus:
    """Cumulative signed spike counts of one layer and the values they reconstruct."""

    reconstruction: np.ndarray
    spikes_total: int = 0

    @classmethod
    def like(cls, potentials: np.ndarray) -> "SpikeBus":
        return cls(np.zeros_like(potentials))


@dataclass
class MembraneLayer:
    net: AdaptedNetwork
    potentials: np.ndarray
    bus: SpikeBus
    last_time: int = 0
    multiplications: int = 0
    gains: np.ndarray | None = None
    fan_out: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def start(cls, net: AdaptedNetwork, gains: np.ndarray | None = None) -> "MembraneLayer":
        """Layer at t = 0, where V(0) = beta(0)."""
        potentials = beta(0.0, net).astype(np.float64)
        network = net.network
        fan_out = _input_fan_out(network.layers[: network.first_linear + 1], network.input_shape)
        return cls(net=net, potentials=potentials, bus=SpikeBus.like(potentials), gains=gains, fan_out=fan_out)

    @property
    def residuals(self) -> np.ndarray:
        return self.potentials - self.bus.reconstruction


def _input_fan_out(layers: Sequence[Layer], input_shape) -> np.ndarray:
    """Fan-out of each input element into the first linear layer, in input layout."""
    *pre, linear = layers
    shape = tuple(input_shape)
    for layer in pre:
        shape = layer.output_shape(shape)
    return np.asarray(linear.fan_out(shape)).reshape(input_shape)


def membrane_step(layer: MembraneLayer, frame: np.ndarray, t: int, span: int = 1) -> np.ndarray:
    """Advances the first-layer potentials from ``t - span`` to ``t`` with the photons of that span."""
    if span < 1 or t != layer.last_time + span:
        raise SpikingError(f"membrane step to t={t} with span {span} does not follow t={layer.last_time}")
    net = layer.net
    frame = np.asarray(frame, dtype=np.float64)
    if layer.gains is not None:
        frame = frame * layer.gains
    a_prev, a_now = alpha(layer.last_time, net), alpha(t, net)
    damping = a_now / a_prev
    leak = beta(t, net) - damping * beta(layer.last_time, net)
    drive = net.network.first_linear_map((frame * net.input_scale)[None])[0]
    layer.potentials = damping * layer.potentials + a_now * drive + leak

    nonzero = frame != 0
    layer.multiplications += int(np.count_nonzero(nonzero) + layer.fan_out[nonzero].sum() + 3 * layer.potentials.size)
    layer.last_time = t
    return layer.potentials


def emit_spikes(layer, tau_dis: float) -> tuple[np.ndarray, np.ndarray]:
    """Signed spike counts bringing every residual into (-tau_dis, tau_dis)."""
    if tau_dis <= 0:
        raise SpikingError(f"tau_dis must be > 0, got {tau_dis}")
    residual = layer.potentials - layer.bus.reconstruction
    magnitude = np.abs(residual)
    counts = np.floor(magnitude / tau_dis)
    counts += (magnitude - counts * tau_dis) >= tau_dis
    counts = (np.sign(residual) * counts).astype(np.int64)
    layer.bus.reconstruction = layer.bus.reconstruction + tau_dis * counts
    layer.bus.spikes_total += int(np.abs(counts).sum())
    return counts, layer.potentials - layer.bus.reconstruction


@dataclass
class AccumulatorLayer:
    """A linear layer above the first, driven by changes of its rectified/pooled input."""

    pre: list[Layer]
    linear: Layer
    potentials: np.ndarray
    bus: SpikeBus
    last_input: np.ndarray
    fan_out: np.ndarray

    def transform(self, reconstruction: np.ndarray) -> np.ndarray:
        x = reconstruction[None]
        for op in self.pre:
            x, _ = op.forward(x)
        return x[0]

    def update(self, reconstruction: np.ndarray) -> int:
        """Applies the change of input; returns the multiplications spent."""
        x = self.transform(reconstruction)
        delta = x - self.last_input
        changed = delta != 0
        if not changed.any():
            return 0
        self.potentials = self.potentials + self.linear.linear(delta[None])[0]
        self.last_input = x
        return int(self.fan_out[changed].sum())


def _build_accumulators(net: AdaptedNetwork, first_reconstruction: np.ndarray, tau_dis: float) -> list[AccumulatorLayer]:
    """Higher layers at t = 0, each already discharged once."""
    network = net.network
    stages, pending = [], []
    reconstruction = first_reconstruction
    for layer in network.layers[network.first_linear + 1 :]:
        if not layer.is_linear:
            pending.append(layer)
            continue
        x = reconstruction[None]
        for op in pending:
            x, _ = op.forward(x)
        x = x[0]
        in_shape = x.shape
        potentials = layer.linear(x[None])[0] + layer.params["b"]
        stage = AccumulatorLayer(pending, layer, potentials, SpikeBus.like(potentials), x, np.asarray(layer.fan_out(in_shape)))
        emit_spikes(stage, tau_dis)
        stages.append(stage)
        reconstruction = stage.bus.reconstruction
        pending = []
    return stages


@dataclass
class PowerMeter:
    per_layer: list[int] = field(default_factory=list)
    baseline: int = 0
    spikes: int = 0

    @property
    def total(self) -> int:
        return int(sum(self.per_layer))

    @property
    def ratio(self) -> float:
        return self.total / self.baseline if self.baseline else float("nan")

    def charge(self, index: int, count: int):
        while len(self.per_layer) <= index:
            self.per_layer.append(0)
        self.per_layer[index] += int(count)


class SpikingNetwork:
    """Stateful spiking run of one stream; bins must arrive in increasing order.

    The t = 0 state is beta(0) for every stream, so its dense pass is not metered here.
    ``spiking_sweep`` charges it once per run.
    """

    def __init__(self, net: AdaptedNetwork, tau_dis: float, gains: np.ndarray | None = None):
        if tau_dis <= 0:
            raise SpikingError(f"tau_dis must be > 0, got {tau_dis}")
        self.tau_dis = tau_dis
        self.meter = PowerMeter()
        self.first = MembraneLayer.start(net, gains)
        emit_spikes(self.first, tau_dis)
        self.stages = _build_accumulators(net, self.first.bus.reconstruction, tau_dis)

    def advance(self, frame: np.ndarray, t: int) -> np.ndarray:
        """Feeds the photons collected since the last step; returns reconstructed logits."""
        before = self.first.multiplications
        membrane_step(self.first, frame, t, t - self.first.last_time)
        self.meter.charge(0, self.first.multiplications - before)
        emit_spikes(self.first, self.tau_dis)
        reconstruction = self.first.bus.reconstruction
        for i, stage in enumerate(self.stages, start=1):
            self.meter.charge(i, stage.update(reconstruction))
            emit_spikes(stage, self.tau_dis)
            reconstruction = stage.bus.reconstruction
        return reconstruction

    @property
    def spikes_total(self) -> int:
        return self.first.bus.spikes_total + sum(stage.bus.spikes_total for stage in self.stages)


def _dense_per_pass(net: AdaptedNetwork) -> int:
    return AdaptiveClassifier(net).dense_multiplications()


def initial_state_multiplications(net: AdaptedNetwork) -> int:
    """Cost of the shared t = 0 state: one dense pass."""
    return _dense_per_pass(net)


def _run_multiplications(runs, initial_state: int) -> int:
    return initial_state + sum(meter.total for _, meter in runs)


def run_stream_spiking(
    stream: PhotonStream,
    net: AdaptedNetwork,
    schedule: ThresholdSchedule,
    tau_dis: float,
    query_ppps: Sequence[float],
    max_ppp: float,
) -> tuple[DecisionTrace, PowerMeter]:
    """FR decision on the spiking network's reconstructed log ratios."""
    bins = query_bins(query_ppps, max_ppp, stream.ppp_per_bin)
    if stream.num_bins == 0 or bins[-1] > stream.num_bins:
        raise SpikingError(f"stream has {stream.num_bins} bins, query needs {bins[-1]}")
    runtime = SpikingNetwork(net, tau_dis, stream.fpn_gains)
    cumulative = stream.cumulative
    ppps = bins * stream.ppp_per_bin
    taus = schedule.at(ppps)
    ratios, previous, stop = [], 0, None
    for q, b in enumerate(bins):
        logits = runtime.advance(cumulative[b] - cumulative[previous], int(b))
        previous = int(b)
        ratios.append(log_ratios_from_logits(logits)[0])
        if first_crossing(np.array([ratios[-1].max()]), np.array([taus[q]])) is not None:
            stop = q
            break
    ratios = np.array(ratios)
    reached = len(ratios)
    index = reached - 1
    trace = DecisionTrace(
        log_ratio_trajectory=ratios,
        query_ppps=ppps[:reached],
        stop_ppp=float(ppps[index]),
        declared_class=int(np.argmax(ratios[index])),
        true_class=stream.source_label,
        stopped_by=StopReason.THRESHOLD if stop is not None else StopReason.CUTOFF,
        regime=Regime.FR,
    )
    runtime.meter.baseline = _dense_per_pass(net) * reached
    runtime.meter.spikes = runtime.spikes_total
    return trace, runtime.meter


def continuous_baseline(
    stream: PhotonStream,
    net: AdaptedNetwork,
    schedule: ThresholdSchedule,
    query_ppps: Sequence[float],
    max_ppp: float,
    noise: NoiseConfig | None = None,
) -> tuple[DecisionTrace, PowerMeter]:
    """Dense forward pass at every query; read noise off so both runtimes see the same counts."""
    noise = replace(noise or NoiseConfig(), read_noise_std=0.0)
    trace = decide_fr(stream, AdaptiveClassifier(net), schedule, query_ppps, max_ppp, noise)
    total = _dense_per_pass(net) * len(trace.query_ppps)
    return trace, PowerMeter(per_layer=[total], baseline=total)


def spiking_sweep(
    data: ImageSet,
    net: AdaptedNetwork,
    schedule: ThresholdSchedule,
    taus: Sequence[float],
    noise: NoiseConfig,
    query_ppps: Sequence[float],
    max_ppp: float,
    seed: int,
) -> pd.DataFrame:
    """Error, speed and multiplication ratio per tau_dis; the tau_dis = 0 row is the continuous reference."""
    num_bins = int(query_bins(query_ppps, max_ppp, noise.ppp_per_bin)[-1])
    rows = {0.0: []} | {float(tau): [] for tau in taus}
    baseline_total = 0
    initial_state = initial_state_multiplications(net)
    for i in range(len(data)):
        stream = simulate_stream(data.image(i), noise, num_bins, make_rng(seed, Purpose.STREAM, i))
        trace, meter = continuous_baseline(stream, net, schedule, query_ppps, max_ppp, noise)
        baseline_total += meter.total
        rows[0.0].append((trace, meter))
        for tau in taus:
            rows[float(tau)].append(run_stream_spiking(stream, net, schedule, float(tau), query_ppps, max_ppp))

    records = []
    for tau, runs in rows.items():
        traces = [trace for trace, _ in runs]
        records.append({
            "tau_dis": tau,
            "error_rate": float(np.mean([not t.correct for t in traces])),
            "median_ppp": float(np.median([t.stop_ppp for t in traces])),
            "mult_ratio": _run_multiplications(runs, initial_state if tau > 0 else 0) / baseline_total if baseline_total else float("nan"),
            "spikes_total": int(sum(m.spikes for _, m in runs)),
        })
        logger.info(f"tau_dis={tau:g}: error={records[-1]['error_rate']:.4f} mult_ratio={records[-1]['mult_ratio']:.3f}")
    return pd.DataFrame(records, columns=SWEEP_COLUMNS)
