"""
Systems under test: small frozen convolutional networks in numpy.

Two reference architectures share one layer vocabulary (conv, ReLU, global
average pool, dense, tanh, sigmoid, bilinear upsample) with hand-written
reverse mode, so input gradients are exact:

  steering       3 strided convs (8/16/32 ch) -> GAP -> dense 16 -> dense 1 (radians)
  segmentation   3 convs (8/16/16 ch) -> 1x1 head -> x4 bilinear upsample (logits)

Activations are laid out (batch, channels, height, width) internally; images
cross the public API as (height, width, channels).

Weight file (.mfwt): b"MFWT", u32 architecture-JSON length, architecture
JSON, u32 tensor count, then per tensor u32 ndim, u32 dims, little-endian
float32 values; trailing CRC32.
"""

import json
import struct
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from numerics import bilinear_matrix
from toolkit_utils import (CorruptFileError, DimensionError, NumericError,
                           atomic_write_bytes, crc32, seal, unseal)

WEIGHT_MAGIC = b"MFWT"
KINDS = ("steering", "segmentation")


# =============================================================================
# Layers
# =============================================================================

class Conv2d:
    type = "conv2d"

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = np.zeros((out_channels, in_channels, kernel, kernel))
        self.bias = np.zeros(out_channels)

    def spec(self):
        return {"type": self.type, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding}

    def params(self):
        return [self.weight, self.bias]

    def set_params(self, tensors):
        self.weight, self.bias = tensors

    def init(self, rng):
        fan_in = self.in_channels * self.kernel * self.kernel
        self.weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=self.weight.shape)
        self.bias = rng.normal(0.0, 0.01, size=self.bias.shape)

    def forward(self, x):
        p, k, s = self.padding, self.kernel, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        out = np.tensordot(windows, self.weight, axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2) + self.bias[None, :, None, None], (xp.shape, windows)

    def backward(self, cache, grad):
        xp_shape, windows = cache
        k, s, p = self.kernel, self.stride, self.padding
        grad_w = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = grad.sum(axis=(0, 2, 3))
        grad_xp = np.zeros(xp_shape)
        ho, wo = grad.shape[2], grad.shape[3]
        for i in range(k):
            for j in range(k):
                grad_xp[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.einsum(
                    "nohw,oc->nchw", grad, self.weight[:, :, i, j])
        if p:
            grad_xp = grad_xp[:, :, p:-p, p:-p]
        return grad_xp, [grad_w, grad_b]


class Dense:
    """Fully connected layer; flattens its input."""
    type = "dense"

    def __init__(self, in_features, out_features):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = np.zeros((out_features, in_features))
        self.bias = np.zeros(out_features)

    def spec(self):
        return {"type": self.type, "in_features": self.in_features, "out_features": self.out_features}

    def params(self):
        return [self.weight, self.bias]

    def set_params(self, tensors):
        self.weight, self.bias = tensors

    def init(self, rng):
        self.weight = rng.normal(0.0, np.sqrt(2.0 / self.in_features), size=self.weight.shape)
        self.bias = rng.normal(0.0, 0.01, size=self.bias.shape)

    def forward(self, x):
        flat = x.reshape(len(x), -1)
        if flat.shape[1] != self.in_features:
            raise DimensionError(f"dense layer expects {self.in_features} features, got {flat.shape[1]}")
        return flat @ self.weight.T + self.bias, (x.shape, flat)

    def backward(self, cache, grad):
        shape, flat = cache
        return (grad @ self.weight).reshape(shape), [grad.T @ flat, grad.sum(axis=0)]


class _Stateless:
    def spec(self):
        return {"type": self.type}

    def params(self):
        return []

    def set_params(self, tensors):
        pass

    def init(self, rng):
        pass


class ReLU(_Stateless):
    type = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, cache, grad):
        return grad * cache, []


class Tanh(_Stateless):
    type = "tanh"

    def forward(self, x):
        out = np.tanh(x)
        return out, out

    def backward(self, cache, grad):
        return grad * (1.0 - cache ** 2), []


class Sigmoid(_Stateless):
    type = "sigmoid"

    def forward(self, x):
        out = 0.5 * (1.0 + np.tanh(0.5 * x))
        return out, out

    def backward(self, cache, grad):
        return grad * cache * (1.0 - cache), []


class GlobalAvgPool(_Stateless):
    type = "global_avg_pool"

    def forward(self, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, cache, grad):
        n, c, h, w = cache
        return np.broadcast_to(grad[:, :, None, None] / (h * w), cache).copy(), []


class BilinearUpsample(_Stateless):
    type = "bilinear_upsample"

    def __init__(self, factor=4):
        self.factor = factor

    def spec(self):
        return {"type": self.type, "factor": self.factor}

    def forward(self, x):
        h, w = x.shape[2], x.shape[3]
        up_h = bilinear_matrix(h, h * self.factor)
        up_w = bilinear_matrix(w, w * self.factor)
        return up_h @ x @ up_w.T, (up_h, up_w)

    def backward(self, cache, grad):
        up_h, up_w = cache
        return up_h.T @ grad @ up_w, []


LAYER_TYPES = {cls.type: cls for cls in (Conv2d, Dense, ReLU, Tanh, Sigmoid, GlobalAvgPool, BilinearUpsample)}


def layer_from_spec(spec):
    spec = dict(spec)
    cls = LAYER_TYPES.get(spec.pop("type", None))
    if cls is None:
        raise CorruptFileError(f"unknown layer spec {spec!r}")
    return cls(**spec)


# =============================================================================
# Reference SUT
# =============================================================================

@dataclass(frozen=True)
class SutOutput:
    values: np.ndarray
    kind: str

    @property
    def angle(self):
        return float(self.values[0])


@dataclass
class ReferenceSut:
    name: str
    kind: str
    layers: List = field(repr=False)
    taps: Tuple[int, ...]
    input_shape: Tuple[int, int, int]
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown SUT kind {self.kind!r}")
        bad = [t for t in self.taps if not 0 <= t < len(self.layers)]
        if bad:
            raise ValueError(f"tap indices {bad} outside 0..{len(self.layers) - 1}")
        self.taps = tuple(self.taps)
        self.input_shape = tuple(self.input_shape)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def architecture(self):
        return {
            "name": self.name,
            "kind": self.kind,
            "taps": list(self.taps),
            "input_shape": list(self.input_shape),
            "layers": [layer.spec() for layer in self.layers],
        }

    def checksum(self):
        return crc32(b"".join(np.ascontiguousarray(p).tobytes() for p in self.params()))

    def freeze(self):
        for p in self.params():
            p.setflags(write=False)
        self.frozen = True
        return self

    def to_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(
                f"{self.name} expects input {self.input_shape}, got {tuple(x.shape[-3:]) if x.ndim >= 3 else x.shape}")
        return x.transpose(0, 3, 1, 2)

    def run(self, batch, keep_caches=False):
        """Forward a (N, C, H, W) batch; returns (output, tap activations, caches)."""
        caches = []
        taps = {}
        x = batch
        for index, layer in enumerate(self.layers):
            x, cache = layer.forward(x)
            if not np.all(np.isfinite(x)):
                raise NumericError(f"{self.name}: non-finite activation", layer=index)
            if keep_caches:
                caches.append(cache)
            if index in self.taps:
                taps[index] = x
        return x, taps, caches

    def backward(self, caches, grad, want_params=False):
        """Reverse pass; returns (input gradient NCHW, per-layer parameter gradients)."""
        param_grads = [None] * len(self.layers)
        for index in range(len(self.layers) - 1, -1, -1):
            grad, grads = self.layers[index].backward(caches[index], grad)
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"{self.name}: non-finite gradient", layer=index)
            if want_params:
                param_grads[index] = grads
        return grad, param_grads


def _to_output(sut, raw):
    if sut.kind == "steering":
        return SutOutput(raw[0].reshape(-1).copy(), sut.kind)
    return SutOutput(raw[0, 0].copy(), sut.kind)


def forward(sut, x):
    """F(x) for one HxWxC image."""
    raw, _, _ = sut.run(sut.to_batch(x))
    return _to_output(sut, raw)


def forward_batch(sut, xs):
    """Raw outputs for an (N, H, W, C) stack: (N,) angles or (N, H, W) logits."""
    raw, _, _ = sut.run(sut.to_batch(xs))
    return raw[:, 0]


def forward_with_taps(sut, x):
    """F(x) plus activations {layer index: (C, H, W) or (features,)} for every declared tap."""
    raw, taps, _ = sut.run(sut.to_batch(x))
    return _to_output(sut, raw), {index: act[0].copy() for index, act in taps.items()}


def input_gradient(sut, x, objective):
    """d objective / d x as an HxWxC grid.

    objective(values) returns (scalar, d scalar / d values) for the SutOutput values.
    """
    batch = sut.to_batch(x)
    raw, _, caches = sut.run(batch, keep_caches=True)
    output = _to_output(sut, raw)
    _, grad_values = objective(output.values)
    grad_values = np.asarray(grad_values, dtype=np.float64)
    if grad_values.shape != output.values.shape:
        raise DimensionError(f"objective gradient shape {grad_values.shape} != output {output.values.shape}")
    grad, _ = sut.backward(caches, grad_values.reshape(raw.shape))
    return grad[0].transpose(1, 2, 0)


def randomize_weights(sut, rng):
    """Same architecture, freshly sampled weights; the original is untouched."""
    clone = sut_from_architecture(sut.architecture())
    for index, layer in enumerate(clone.layers):
        layer.init(rng.substream("layer", index))
    return clone.freeze()


# =============================================================================
# Builders
# =============================================================================

def sut_from_architecture(arch):
    return ReferenceSut(
        name=arch["name"],
        kind=arch["kind"],
        layers=[layer_from_spec(spec) for spec in arch["layers"]],
        taps=tuple(arch["taps"]),
        input_shape=tuple(arch["input_shape"]),
    )


def _initialised(sut, rng):
    for index, layer in enumerate(sut.layers):
        layer.init(rng.substream("layer", index))
    return sut


def build_steering_sut(rng, name="steer", size=128, taps=(5,)):
    layers = [
        Conv2d(3, 8, stride=2), ReLU(),
        Conv2d(8, 16, stride=2), ReLU(),
        Conv2d(16, 32, stride=2), ReLU(),
        GlobalAvgPool(),
        Dense(32, 16), ReLU(),
        Dense(16, 1),
    ]
    return _initialised(ReferenceSut(name, "steering", layers, taps, (size, size, 3)), rng)


def build_segmentation_sut(rng, name="da", size=128, taps=(5,)):
    layers = [
        Conv2d(3, 8, stride=2), ReLU(),
        Conv2d(8, 16, stride=2), ReLU(),
        Conv2d(16, 16, stride=1), ReLU(),
        Conv2d(16, 1, kernel=1, stride=1, padding=0),
        BilinearUpsample(4),
    ]
    return _initialised(ReferenceSut(name, "segmentation", layers, taps, (size, size, 3)), rng)


def build_sut(kind, rng, name=None, size=128):
    if kind == "steering":
        return build_steering_sut(rng, name or "steer", size)
    if kind == "segmentation":
        return build_segmentation_sut(rng, name or "da", size)
    raise ValueError(f"unknown SUT kind {kind!r}")


def build_linear_sut(weights, bias=0.0, name="linear"):
    """One dense layer, output = sum(weights * x) + bias; weights are HxWxC."""
    weights = np.asarray(weights, dtype=np.float64)
    h, w, c = weights.shape
    layer = Dense(h * w * c, 1)
    layer.weight = weights.transpose(2, 0, 1).reshape(1, -1).copy()
    layer.bias = np.array([float(bias)])
    return ReferenceSut(name, "steering", [layer], (0,), (h, w, c)).freeze()


# =============================================================================
# Weight files
# =============================================================================

def encode_weights(sut):
    arch = json.dumps(sut.architecture(), sort_keys=True).encode()
    parts = [struct.pack("<I", len(arch)), arch, struct.pack("<I", len(sut.params()))]
    for p in sut.params():
        parts.append(struct.pack("<I", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return seal(WEIGHT_MAGIC, b"".join(parts))


def decode_weights(data, path="<bytes>"):
    payload = unseal(data, WEIGHT_MAGIC, path)
    try:
        (arch_len,) = struct.unpack_from("<I", payload, 0)
        offset = 4
        arch = json.loads(payload[offset:offset + arch_len])
        offset += arch_len
        (count,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        tensors = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", payload, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            values = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            tensors.append(values.reshape(shape).astype(np.float64))
    except (struct.error, ValueError) as e:
        raise CorruptFileError(f"{path}: malformed weight payload ({e})")

    sut = sut_from_architecture(arch)
    for layer in sut.layers:
        n = len(layer.params())
        if n:
            expected = [p.shape for p in layer.params()]
            got, tensors = tensors[:n], tensors[n:]
            if [t.shape for t in got] != expected:
                raise CorruptFileError(f"{path}: tensor shapes {[t.shape for t in got]} != {expected}")
            layer.set_params(got)
    if tensors:
        raise CorruptFileError(f"{path}: {len(tensors)} unused tensors")
    return sut.freeze()


def save_weights(sut, path):
    atomic_write_bytes(path, encode_weights(sut))


def load_weights(path):
    with open(path, "rb") as f:
        return decode_weights(f.read(), path)
