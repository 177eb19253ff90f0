import numpy as np
import pytest

from conftest import make_adapted
from scotopic.errors import ModelError
from scotopic.models.layers import Dense, Flatten
from scotopic.sensor.photon_sim import CountImage
from scotopic.models.network import (
    LOG_RATIO_LIMIT,
    AdaptedNetwork,
    Network,
    adapted_logits,
    alpha,
    beta,
    build_network,
    first_layer_adapted,
    forward_adapted,
    forward_plain,
    gamma,
    log_ratios_from_logits,
    posterior_from_logits,
)
from scotopic.models.training import adapted_loss_and_grads
from scotopic.sensor.photon_sim import CountImage


def _scalar_net(t0=1.0, reference_bins=4.0):
    network = Network([Flatten(), Dense(np.array([[1.0]]), np.array([0.0]))], (1, 1, 1))
    return AdaptedNetwork(
        network=network,
        prior_mean=np.ones((1, 1, 1)),
        log_prior_strength=np.log(t0),
        reference_bins=reference_bins,
        input_scale=1.0,
    )


def test_alpha_example():
    net = _scalar_net(t0=1.0, reference_bins=9.0)
    assert alpha(0, net) == pytest.approx(10.0)
    assert alpha(9, net) == pytest.approx(1.0)
    assert gamma(9, net) == pytest.approx(0.0)


def test_beta_example():
    net = _scalar_net(t0=1.0, reference_bins=4.0)
    np.testing.assert_allclose(beta(1, net), [1.5])


def test_negative_time_is_rejected():
    with pytest.raises(ModelError):
        alpha(-1, _scalar_net())


def test_adapted_layer_is_affine_in_counts(adapted_net):
    counts = np.random.default_rng(0).poisson(2.0, size=(1, 6, 6, 1)).astype(float)
    t = 50
    features = first_layer_adapted(counts, t, adapted_net)
    linear = adapted_net.network.first_linear_map(counts * adapted_net.input_scale)
    np.testing.assert_allclose(features, alpha(t, adapted_net) * linear + beta(t, adapted_net)[None], atol=1e-10)


def test_full_exposure_matches_plain_network(adapted_net):
    counts = np.random.default_rng(1).poisson(100.0, size=(6, 6, 1)).astype(float)
    reference = int(adapted_net.reference_bins)
    adapted = forward_adapted(CountImage(counts, reference, 220.0), adapted_net)
    plain = forward_plain(counts * adapted_net.input_scale, adapted_net.network)
    np.testing.assert_allclose(adapted.probabilities, plain.probabilities, atol=1e-12)


def test_zero_exposure_uses_prior_only(adapted_net):
    blank = forward_adapted(CountImage(np.zeros((6, 6, 1)), 0, 0.0), adapted_net)
    prior = forward_plain(adapted_net.prior_mean * adapted_net.reference_bins * adapted_net.input_scale, adapted_net.network)
    np.testing.assert_allclose(blank.probabilities, prior.probabilities, atol=1e-12)


def test_posterior_is_normalized(adapted_net):
    rng = np.random.default_rng(2)
    for t in (0, 1, 10, 1000):
        counts = rng.poisson(0.2 * max(t, 1), size=(6, 6, 1)).astype(float)
        posterior = forward_adapted(CountImage(counts, t, 0.22 * t), adapted_net)
        assert posterior.probabilities.sum() == pytest.approx(1.0)
        assert np.all(posterior.probabilities >= 0)


def test_log_ratios_are_clipped():
    ratios = log_ratios_from_logits(np.array([[800.0, -800.0]]))
    np.testing.assert_allclose(ratios, [[LOG_RATIO_LIMIT, -LOG_RATIO_LIMIT]])
    posterior = posterior_from_logits(np.array([0.0, np.log(3.0)]))
    np.testing.assert_allclose(posterior.probabilities, [0.25, 0.75])
    np.testing.assert_allclose(posterior.log_ratios, [np.log(1 / 3), np.log(3.0)])
    assert posterior.predicted == 1


@pytest.mark.parametrize("architecture", ["mlp", "conv"])
def test_prior_strength_gradient_matches_finite_difference(architecture):
    net = make_adapted(seed=4, architecture=architecture)
    rng = np.random.default_rng(5)
    counts = rng.poisson(1.0, size=(4, 6, 6, 1)).astype(float)
    t = np.array([1.0, 10.0, 100.0, 700.0])
    labels = np.array([0, 1, 1, 0])
    _, _, grad, _ = adapted_loss_and_grads(net, counts, t, labels)

    eps = 1e-6
    base = net.log_prior_strength
    net.log_prior_strength = base + eps
    plus = adapted_loss_and_grads(net, counts, t, labels)[0]
    net.log_prior_strength = base - eps
    minus = adapted_loss_and_grads(net, counts, t, labels)[0]
    net.log_prior_strength = base
    assert grad == pytest.approx((plus - minus) / (2 * eps), rel=1e-4, abs=1e-8)


def test_network_loss_gradient_matches_finite_difference():
    rng = np.random.default_rng(6)
    network = build_network("mlp", (3, 3, 1), 3, rng, hidden_units=(4,))
    x = rng.normal(size=(5, 3, 3, 1))
    labels = np.array([0, 1, 2, 1, 0])
    _, grads, _, _ = network.loss_and_grads(x, labels, weight_decay=0.01)
    weight = network.layers[1].params["W"]
    eps = 1e-6
    i = (2, 1)
    old = weight[i]
    weight[i] = old + eps
    plus = network.loss_and_grads(x, labels, 0.01)[0]
    weight[i] = old - eps
    minus = network.loss_and_grads(x, labels, 0.01)[0]
    weight[i] = old
    assert grads[1]["W"][i] == pytest.approx((plus - minus) / (2 * eps), rel=1e-4)


def test_network_validates_structure():
    with pytest.raises(ModelError):
        Network([Flatten()], (2, 2, 1))
    with pytest.raises(ModelError):
        build_network("resnet", (6, 6, 1), 2, np.random.default_rng(0))
    net = make_adapted()
    with pytest.raises(ModelError):
        net.network.forward(np.zeros((1, 5, 5, 1)))
    with pytest.raises(ModelError):
        AdaptedNetwork(net.network, np.zeros((5, 5, 1)), 0.0, 1000.0, 1 / 220)


@pytest.mark.parametrize("architecture", ["mlp", "conv"])
def test_adapted_output_is_continuous_in_time(architecture):
    net = make_adapted(seed=8, architecture=architecture)
    counts = np.random.default_rng(2).poisson(3.0, size=(1, 6, 6, 1)).astype(float)
    base = adapted_logits(counts, 40.0, net)
    steps = [1e-2, 1e-3, 1e-4]
    gaps = [np.abs(adapted_logits(counts, 40.0 + dt, net) - base).max() for dt in steps]
    assert gaps[-1] < 1e-3
    assert gaps[1] <= gaps[0] / 5
    assert gaps[2] <= gaps[1] / 5


def test_posterior_moves_little_between_adjacent_bins():
    net = make_adapted(seed=8)
    counts = np.full((6, 6, 1), 30.0)
    probs = [forward_adapted(CountImage(counts, t, t * 0.22), net).probabilities for t in range(95, 106)]
    assert np.abs(np.diff(probs, axis=0)).max() < 0.05
