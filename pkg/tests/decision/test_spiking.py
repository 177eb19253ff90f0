from types import SimpleNamespace

import numpy as np
import pytest

from conftest import make_adapted, make_toy_images
from scotopic.decision.spiking import (
    SWEEP_COLUMNS,
    MembraneLayer,
    SpikeBus,
    SpikingNetwork,
    continuous_baseline,
    emit_spikes,
    initial_state_multiplications,
    membrane_step,
    run_stream_spiking,
    spiking_sweep,
)
from scotopic.decision.sprt import StopReason, ThresholdSchedule, query_bins
from scotopic.errors import SpikingError
from scotopic.models.layers import Dense, Flatten
from scotopic.models.network import AdaptedNetwork, Network, beta, first_layer_adapted
from scotopic.rng import Purpose, make_rng
from scotopic.sensor.photon_sim import IntensityImage, NoiseConfig, simulate_stream

NEVER = ThresholdSchedule.constant(100.0)
QUERIES = [0.22, 0.66, 2.2, 6.6, 22.0]


def _scalar_net():
    network = Network([Flatten(), Dense(np.array([[1.0]]), np.array([0.0]))], (1, 1, 1))
    return AdaptedNetwork(network, np.ones((1, 1, 1)), 0.0, 4.0, 1.0)


def test_membrane_recurrence_scalar_example():
    layer = MembraneLayer.start(_scalar_net())
    for t, x in enumerate([1.0, 0.0, 2.0, 1.0], start=1):
        membrane_step(layer, np.full((1, 1, 1), x), t)
    np.testing.assert_allclose(layer.potentials, [4.0])


def test_membrane_without_photons_follows_prior():
    net = _scalar_net()
    layer = MembraneLayer.start(net)
    for t in range(1, 5):
        membrane_step(layer, np.zeros((1, 1, 1)), t)
        np.testing.assert_allclose(layer.potentials, beta(t, net))


@pytest.mark.parametrize("architecture", ["mlp", "conv"])
def test_membrane_matches_dense_first_layer(architecture):
    net = make_adapted(seed=3, hidden=(20,), architecture=architecture)
    rng = np.random.default_rng(0)
    frames = rng.poisson(0.3, size=(50, 6, 6, 1)).astype(float)
    layer = MembraneLayer.start(net)
    t = 0
    for span in [1] * 30 + [2] * 10:
        frame = frames[t : t + span].sum(axis=0)
        t += span
        potentials = membrane_step(layer, frame, t, span)
        expected = first_layer_adapted(frames[:t].sum(axis=0)[None], t, net)[0]
        np.testing.assert_allclose(potentials, expected, rtol=1e-6, atol=1e-9)
    assert layer.multiplications > 0


def test_membrane_rejects_out_of_order_steps():
    layer = MembraneLayer.start(_scalar_net())
    membrane_step(layer, np.ones((1, 1, 1)), 1)
    with pytest.raises(SpikingError):
        membrane_step(layer, np.ones((1, 1, 1)), 1)
    with pytest.raises(SpikingError):
        membrane_step(layer, np.ones((1, 1, 1)), 4, span=2)


def _layer(values):
    values = np.asarray(values, dtype=float)
    return SimpleNamespace(potentials=values, bus=SpikeBus(np.zeros_like(values)))


def test_emit_spikes_examples():
    layer = _layer([0.55, -0.1, -0.45, 0.2])
    counts, residuals = emit_spikes(layer, 0.2)
    np.testing.assert_array_equal(counts, [2, 0, -2, 1])
    np.testing.assert_allclose(residuals, [0.15, -0.1, -0.05, 0.0], atol=1e-12)
    assert layer.bus.spikes_total == 5
    with pytest.raises(SpikingError):
        emit_spikes(layer, 0.0)


def test_reconstruction_stays_within_tau():
    layer = _layer(np.zeros(10))
    rng = np.random.default_rng(1)
    for _ in range(20):
        layer.potentials = layer.potentials + rng.normal(0.0, 1.0, size=10)
        emit_spikes(layer, 0.3)
        assert np.all(np.abs(layer.potentials - layer.bus.reconstruction) < 0.3)


def _stream(label=0, seed=0, noise=None):
    image = make_toy_images(n=2).image(label)
    return simulate_stream(image, noise or NoiseConfig(fpn_std=0.0), 100, seed)


def test_fine_spikes_reproduce_continuous_run():
    net = make_adapted(seed=5, architecture="conv")
    stream = _stream()
    trace, meter = run_stream_spiking(stream, net, NEVER, 1e-6, QUERIES, 22.0)
    reference, _ = continuous_baseline(stream, net, NEVER, QUERIES, 22.0, NoiseConfig(fpn_std=0.0))
    assert trace.stopped_by is StopReason.CUTOFF
    np.testing.assert_allclose(trace.log_ratio_trajectory, reference.log_ratio_trajectory, atol=1e-3)
    assert trace.declared_class == reference.declared_class
    assert meter.baseline > 0
    assert all(count >= 0 for count in meter.per_layer)


def test_spiking_run_stops_on_threshold():
    net = make_adapted(seed=5)
    trace, meter = run_stream_spiking(_stream(), net, ThresholdSchedule.constant(-100.0), 0.2, QUERIES, 22.0)
    assert trace.stopped_by is StopReason.THRESHOLD
    assert trace.stop_ppp == pytest.approx(0.22)
    assert meter.spikes > 0


def test_spiking_network_rejects_bad_tau():
    with pytest.raises(SpikingError):
        SpikingNetwork(make_adapted(), 0.0)
    with pytest.raises(SpikingError):
        run_stream_spiking(_stream(), make_adapted(), NEVER, 0.1, QUERIES, 44.0)


def test_spiking_sweep_reports_each_tau():
    data = make_toy_images(n=4)
    net = make_adapted(seed=2)
    frame = spiking_sweep(data, net, ThresholdSchedule.constant(2.0), [0.1, 0.4], NoiseConfig(), QUERIES, 22.0, seed=0)
    assert list(frame.columns) == SWEEP_COLUMNS
    assert list(frame["tau_dis"]) == [0.0, 0.1, 0.4]
    assert frame.loc[0, "mult_ratio"] == pytest.approx(1.0)
    assert frame.loc[0, "spikes_total"] == 0
    assert (frame["error_rate"].between(0.0, 1.0)).all()


COARSENING = [0.05, 0.1, 0.2, 0.4, 0.8]


@pytest.fixture(scope="module")
def conv_sweep():
    data = make_toy_images(n=4)
    net = make_adapted(seed=5, architecture="conv")
    return spiking_sweep(data, net, NEVER, COARSENING, NoiseConfig(), QUERIES, 22.0, seed=0)


def test_spikes_fall_as_tau_grows(conv_sweep):
    spikes = conv_sweep["spikes_total"].to_numpy()[1:]
    assert spikes[0] > 0
    assert np.all(np.diff(spikes) <= 0)


def test_mult_ratio_at_tau_point_two(conv_sweep):
    row = conv_sweep[conv_sweep["tau_dis"] == 0.2].iloc[0]
    assert 0.0 < row["mult_ratio"] <= 0.6


def test_initial_state_is_not_metered_per_stream():
    net = make_adapted(seed=5, architecture="conv")
    assert SpikingNetwork(net, 0.2).meter.total == 0
    assert initial_state_multiplications(net) > 0


def test_sweep_charges_initial_state_once():
    data = make_toy_images(n=3)
    net = make_adapted(seed=5, architecture="conv")
    noise = NoiseConfig()
    frame = spiking_sweep(data, net, NEVER, [0.2], noise, QUERIES, 22.0, seed=0)

    num_bins = int(query_bins(QUERIES, 22.0, noise.ppp_per_bin)[-1])
    spiking, dense = initial_state_multiplications(net), 0
    for i in range(len(data)):
        stream = simulate_stream(data.image(i), noise, num_bins, make_rng(0, Purpose.STREAM, i))
        _, meter = run_stream_spiking(stream, net, NEVER, 0.2, QUERIES, 22.0)
        spiking += meter.total
        _, reference = continuous_baseline(stream, net, NEVER, QUERIES, 22.0, noise)
        dense += reference.total
    assert frame.loc[1, "mult_ratio"] == pytest.approx(spiking / dense)
