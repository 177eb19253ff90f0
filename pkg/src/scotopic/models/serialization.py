"""Versioned little-endian binary container for trained models.

Layout (all integers unsigned, little-endian; arrays float64 row-major):

    magic      4 bytes  b"SCOT"
    version    u16      FORMAT_VERSION
    kind       u8       0 plain network, 1 adapted network, 2 ensemble
    reserved   u8       0
    body       kind-specific, see below

    network    := shape  u32 num_layers  layer*
    shape      := u8 ndim  u32 dims[ndim]
    array      := shape  f64 values[prod(dims)]
    layer      := u8 code (1 conv, 2 dense, 3 relu, 4 maxpool, 5 flatten)
                  [array W  array b]   (conv and dense only)

    plain      := network
    adapted    := network  array prior_mean  f64 log_t0  f64 T  f64 input_scale
    ensemble   := u32 count  (f64 anchor_ppp  network)*count
"""

from __future__ import annotations

import io
import logging
import os
import struct

import numpy as np

from scotopic.errors import ModelError
from scotopic.models.layers import Conv2D, Dense, Flatten, Layer, MaxPool2D, ReLU
from scotopic.models.network import AdaptedNetwork, Network

logger = logging.getLogger(__name__)

MAGIC = b"SCOT"
FORMAT_VERSION = 1

KIND_PLAIN, KIND_ADAPTED, KIND_ENSEMBLE = 0, 1, 2
LAYER_CODES = {"conv": 1, "dense": 2, "relu": 3, "maxpool": 4, "flatten": 5}
LAYER_KINDS = {code: kind for kind, code in LAYER_CODES.items()}

Model = Network | AdaptedNetwork | list[tuple[float, Network]]


def _write_shape(out: io.BytesIO, shape):
    out.write(struct.pack("<B", len(shape)))
    out.write(struct.pack(f"<{len(shape)}I", *shape))


def _write_array(out: io.BytesIO, array: np.ndarray):
    _write_shape(out, array.shape)
    out.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _write_network(out: io.BytesIO, network: Network):
    _write_shape(out, network.input_shape)
    out.write(struct.pack("<I", len(network.layers)))
    for layer in network.layers:
        out.write(struct.pack("<B", LAYER_CODES[layer.kind]))
        if layer.is_linear:
            _write_array(out, layer.params["W"])
            _write_array(out, layer.params["b"])


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise ModelError(f"truncated model file: needed {self.offset + size} bytes, have {len(self.data)}")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def shape(self) -> tuple[int, ...]:
        (ndim,) = self.unpack("<B")
        return self.unpack(f"<{ndim}I")

    def array(self) -> np.ndarray:
        shape = self.shape()
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    def network(self) -> Network:
        input_shape = self.shape()
        (num_layers,) = self.unpack("<I")
        layers: list[Layer] = []
        for _ in range(num_layers):
            (code,) = self.unpack("<B")
            kind = LAYER_KINDS.get(code)
            if kind == "conv":
                layers.append(Conv2D(self.array(), self.array()))
            elif kind == "dense":
                layers.append(Dense(self.array(), self.array()))
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "maxpool":
                layers.append(MaxPool2D())
            elif kind == "flatten":
                layers.append(Flatten())
            else:
                raise ModelError(f"unknown layer code {code}")
        return Network(layers, input_shape)


def dumps(model: Model) -> bytes:
    out = io.BytesIO()
    if isinstance(model, AdaptedNetwork):
        kind = KIND_ADAPTED
    elif isinstance(model, Network):
        kind = KIND_PLAIN
    else:
        kind = KIND_ENSEMBLE
    out.write(MAGIC + struct.pack("<HBB", FORMAT_VERSION, kind, 0))
    if kind == KIND_ADAPTED:
        _write_network(out, model.network)
        _write_array(out, model.prior_mean)
        out.write(struct.pack("<3d", model.log_prior_strength, model.reference_bins, model.input_scale))
    elif kind == KIND_PLAIN:
        _write_network(out, model)
    else:
        out.write(struct.pack("<I", len(model)))
        for anchor, network in model:
            out.write(struct.pack("<d", anchor))
            _write_network(out, network)
    return out.getvalue()


def loads(data: bytes) -> Model:
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise ModelError("not a scotopic model file (bad magic)")
    version, kind, _ = reader.unpack("<HBB")
    if version != FORMAT_VERSION:
        raise ModelError(f"unsupported model format version {version}, expected {FORMAT_VERSION}")
    if kind == KIND_PLAIN:
        return reader.network()
    if kind == KIND_ADAPTED:
        network = reader.network()
        prior = reader.array()
        log_t0, reference_bins, input_scale = reader.unpack("<3d")
        return AdaptedNetwork(network, prior, log_t0, reference_bins, input_scale)
    if kind == KIND_ENSEMBLE:
        (count,) = reader.unpack("<I")
        members = []
        for _ in range(count):
            (anchor,) = reader.unpack("<d")
            members.append((anchor, reader.network()))
        return members
    raise ModelError(f"unknown model kind {kind}")


def save_model(path: str, model: Model) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(dumps(model))
    logger.info(f"Saved model to {path}")
    return path


def load_model(path: str) -> Model:
    if not os.path.exists(path):
        raise ModelError(f"model file not found: {path}")
    with open(path, "rb") as f:
        return loads(f.read())
