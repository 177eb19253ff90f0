"""Minimal layer set for LeNet-class networks, NHWC, float64.

Each layer exposes ``forward(x) -> (y, cache)`` and
``backward(dy, cache) -> (dx, grads)`` so networks can be trained with plain
SGD and gradient-checked against finite differences.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from scotopic.errors import ModelError


class Layer:
    kind = "layer"
    params: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}

    @property
    def is_linear(self) -> bool:
        return "W" in self.params

    def forward(self, x: np.ndarray):
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache):
        raise NotImplementedError

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return input_shape

    def multiplications(self, input_shape: tuple[int, ...]) -> int:
        """Multiplications of one dense forward pass for a single example."""
        return 0

    def linear(self, x: np.ndarray) -> np.ndarray:
        """The layer's linear map without bias (linear layers only)."""
        raise ModelError(f"{self.kind} layer has no linear map")

    def fan_out(self, input_shape: tuple[int, ...]) -> np.ndarray:
        """Per-input-element count of output units it feeds (linear layers only)."""
        raise ModelError(f"{self.kind} layer has no fan-out")


class Conv2D(Layer):
    """Valid convolution, stride 1. Kernel layout (k, k, in_channels, features)."""

    kind = "conv"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        super().__init__()
        if weight.ndim != 4 or weight.shape[0] != weight.shape[1]:
            raise ModelError(f"conv kernel must be (k, k, C, F), got {weight.shape}")
        if bias.shape != (weight.shape[3],):
            raise ModelError(f"conv bias must have shape ({weight.shape[3]},), got {bias.shape}")
        self.params = {"W": weight, "b": bias}

    @property
    def kernel_size(self) -> int:
        return self.params["W"].shape[0]

    def _windows(self, x: np.ndarray) -> np.ndarray:
        k = self.kernel_size
        if x.shape[1] < k or x.shape[2] < k:
            raise ModelError(f"input {x.shape[1:]} smaller than {k}x{k} kernel")
        if x.shape[3] != self.params["W"].shape[2]:
            raise ModelError(f"input has {x.shape[3]} channels, kernel expects {self.params['W'].shape[2]}")
        # (N, Ho, Wo, C, k, k)
        return sliding_window_view(x, (k, k), axis=(1, 2))

    def linear(self, x: np.ndarray) -> np.ndarray:
        return np.tensordot(self._windows(x), self.params["W"], axes=([3, 4, 5], [2, 0, 1]))

    def forward(self, x):
        windows = self._windows(x)
        y = np.tensordot(windows, self.params["W"], axes=([3, 4, 5], [2, 0, 1])) + self.params["b"]
        return y, windows

    def backward(self, dy, windows):
        k = self.kernel_size
        grads = {
            "W": np.tensordot(windows, dy, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3),
            "b": dy.sum(axis=(0, 1, 2)),
        }
        padded = np.pad(dy, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
        flipped = self.params["W"][::-1, ::-1]
        dy_windows = sliding_window_view(padded, (k, k), axis=(1, 2))  # (N, H, W, F, k, k)
        dx = np.tensordot(dy_windows, flipped, axes=([3, 4, 5], [3, 0, 1]))
        return dx, grads

    def output_shape(self, input_shape):
        k = self.kernel_size
        h, w, _ = input_shape
        return (h - k + 1, w - k + 1, self.params["W"].shape[3])

    def multiplications(self, input_shape):
        ho, wo, features = self.output_shape(input_shape)
        k, _, channels, _ = self.params["W"].shape
        return ho * wo * features * k * k * channels

    def fan_out(self, input_shape):
        k = self.kernel_size
        h, w, channels = input_shape
        ho, wo, features = self.output_shape(input_shape)
        # Number of valid output positions whose window covers each input pixel.
        rows = np.minimum(np.arange(h), ho - 1) - np.maximum(np.arange(h) - k + 1, 0) + 1
        cols = np.minimum(np.arange(w), wo - 1) - np.maximum(np.arange(w) - k + 1, 0) + 1
        per_pixel = np.outer(rows, cols) * features
        return np.repeat(per_pixel[:, :, None], channels, axis=2)


class Dense(Layer):
    kind = "dense"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        super().__init__()
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise ModelError(f"dense weight/bias shapes {weight.shape}/{bias.shape} are inconsistent")
        self.params = {"W": weight, "b": bias}

    def _check(self, x):
        if x.ndim != 2 or x.shape[1] != self.params["W"].shape[0]:
            raise ModelError(f"dense layer expects (N, {self.params['W'].shape[0]}) input, got {x.shape}")

    def linear(self, x):
        self._check(x)
        return x @ self.params["W"]

    def forward(self, x):
        self._check(x)
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, dy, x):
        grads = {"W": x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.params["W"].T, grads

    def output_shape(self, input_shape):
        return (self.params["W"].shape[1],)

    def multiplications(self, input_shape):
        return int(self.params["W"].size)

    def fan_out(self, input_shape):
        return np.full(input_shape, self.params["W"].shape[1], dtype=np.int64)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask):
        return dy * mask, {}


class MaxPool2D(Layer):
    """2x2 max pooling, stride 2; trailing odd rows/columns are dropped."""

    kind = "maxpool"

    def _blocks(self, x):
        n, h, w, c = x.shape
        ho, wo = h // 2, w // 2
        blocks = x[:, : ho * 2, : wo * 2].reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4)
        return blocks.reshape(n, ho, wo, c, 4)

    def forward(self, x):
        blocks = self._blocks(x)
        index = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, index[..., None], axis=-1)[..., 0]
        return y, (x.shape, index)

    def backward(self, dy, cache):
        shape, index = cache
        n, h, w, c = shape
        ho, wo = h // 2, w // 2
        blocks = np.zeros((n, ho, wo, c, 4), dtype=dy.dtype)
        np.put_along_axis(blocks, index[..., None], dy[..., None], axis=-1)
        dx = np.zeros(shape, dtype=dy.dtype)
        dx[:, : ho * 2, : wo * 2] = blocks.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * 2, wo * 2, c)
        return dx, {}

    def output_shape(self, input_shape):
        h, w, c = input_shape
        return (h // 2, w // 2, c)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), {}

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


def he_conv(rng: np.random.Generator, k: int, channels: int, features: int) -> Conv2D:
    std = np.sqrt(2.0 / (k * k * channels))
    return Conv2D(rng.normal(0.0, std, size=(k, k, channels, features)), np.zeros(features))


def he_dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> Dense:
    return Dense(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)), np.zeros(fan_out))
