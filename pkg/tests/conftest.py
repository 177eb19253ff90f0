import pytest
import os
import struct
import sys

import numpy as np

# Add src to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "../src")))

from scotopic.models.network import AdaptedNetwork, build_network
from scotopic.sensor.photon_sim import NoiseConfig, pixel_rate
from scotopic.tools.idx import IMAGES_MAGIC, LABELS_MAGIC, ImageSet


def make_toy_images(n: int = 20, size: int = 6, seed: int = 0) -> ImageSet:
    """Two classes: bright left half (0) or bright right half (1), with mild pixel noise."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    pixels = np.full((n, size, size, 1), 0.1)
    half = size // 2
    pixels[labels == 0, :, :half] = 0.9
    pixels[labels == 1, :, half:] = 0.9
    pixels = np.clip(pixels + rng.uniform(-0.05, 0.05, size=pixels.shape), 0.0, 1.0)
    return ImageSet(pixels, labels)


def make_adapted(seed: int = 0, size: int = 6, hidden=(5,), log_t0: float = 0.3, architecture: str = "mlp") -> AdaptedNetwork:
    rng = np.random.default_rng(seed)
    network = build_network(architecture, (size, size, 1), 2, rng, conv_features=(2,), hidden_units=hidden, kernel_size=3)
    for layer in network.layers:
        if layer.is_linear:
            layer.params["b"] = rng.normal(0.0, 0.1, size=layer.params["b"].shape)
    noise = NoiseConfig()
    mean_image = rng.uniform(0.0, 1.0, size=(size, size, 1))
    return AdaptedNetwork(
        network=network,
        prior_mean=pixel_rate(mean_image, noise) * noise.bin_width,
        log_prior_strength=log_t0,
        reference_bins=1000.0,
        input_scale=1.0 / 220.0,
    )


def write_idx(directory, prefix: str, data: ImageSet):
    """Writes a toy set as <prefix>-images / <prefix>-labels IDX files."""
    n, rows, cols, _ = data.pixels.shape
    pixels = np.rint(data.pixels[..., 0] * 255).astype(np.uint8)
    with open(os.path.join(directory, f"{prefix}-images"), "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    with open(os.path.join(directory, f"{prefix}-labels"), "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, n) + data.labels.astype(np.uint8).tobytes())


def tiny_experiment(tmp_path, kind: str = "waldnet") -> dict:
    """Toy IDX files under tmp_path/data and a config small enough to run end to end in seconds."""
    data_dir = tmp_path / "data"
    data_dir.mkdir(exist_ok=True)
    write_idx(str(data_dir), "train", make_toy_images(n=24, seed=1))
    write_idx(str(data_dir), "test", make_toy_images(n=8, seed=2))
    return {
        "data": {
            "data_dir": str(data_dir),
            "train_images": "train-images",
            "train_labels": "train-labels",
            "test_images": "test-images",
            "test_labels": "test-labels",
            "train_subset": 0,
            "test_subset": 0,
        },
        "model": {"kind": kind, "architecture": "mlp", "hidden_units": [6]},
        "train": {"epochs": 2, "batch_size": 12, "learning_rate": 0.02, "baseline_learning_rate": 0.02},
        "anneal": {"iterations": 10},
        "decision": {
            "thresholds": [1.0, 3.0],
            "etas": [0.01],
            "max_ppp": 22.0,
            "query_points": 6,
            "int_ppps": [0.22, 22.0],
            "bootstrap_resamples": 20,
            "tune_examples": 12,
            "noise_values": [0.0, 0.3],
        },
        "spiking": {"taus": [0.2], "threshold": 2.0, "examples": 4},
        "light": {"ppps": [0.22, 2.2, 22.0], "train_images": 8, "eval_images": 4, "box_sizes": [1, 2], "top_ks": [1, 3]},
        "run": {"seed": 0, "output_dir": str(tmp_path / "results")},
    }


@pytest.fixture
def toy_images():
    return make_toy_images()


@pytest.fixture
def adapted_net():
    return make_adapted()


@pytest.fixture
def quiet_noise():
    """Shot noise only: no dark current, read noise or fixed-pattern noise."""
    return NoiseConfig(dark_current=0.0, read_noise_std=0.0, fpn_std=0.0)
