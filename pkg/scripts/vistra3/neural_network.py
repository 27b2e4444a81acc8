#!/usr/bin/env python3
"""
Minimal numpy neural-network toolkit

Layers keep whatever they need from the forward pass and implement an
explicit backward pass. Tensors are channel-first numpy arrays:
(N, C, H, W) for 2-D convolutions, (N, C, T, H, W) for 3-D ones.
Parameters default to float32; reductions accumulate in float64. A model
built with dtype=np.float64 runs entirely in double precision.

Checkpoint layout (little-endian):

    magic "VNNM" | version u16 | header length u32 | UTF-8 JSON header |
    parameter blobs in header order
"""

import json
import logging
import os
import struct
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from vistra3_base import NetworkError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VNNM"
CHECKPOINT_VERSION = 1
CHECKPOINT_PREAMBLE = struct.Struct("<4sHI")


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Convert to a contiguous array of `dtype`, rejecting NaN/Inf"""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise NetworkError('non-finite', "tensor contains NaN or Inf values")
    return arr


def _tuple(value, n: int) -> Tuple[int, ...]:
    if isinstance(value, int):
        return (value,) * n
    value = tuple(int(v) for v in value)
    if len(value) != n:
        raise NetworkError('invalid-layer', f"expected {n} values, got {value}")
    return value


def _im2col(x: np.ndarray, kernel: Tuple[int, ...], stride: Tuple[int, ...],
            padding: Tuple[int, ...]) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """Rows of zero-padded receptive fields, (N * prod(out), C * prod(kernel))"""
    nd = len(kernel)
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    if any(xp.shape[2 + d] < kernel[d] for d in range(nd)):
        raise NetworkError('shape-mismatch', f"input {x.shape} is smaller than kernel {kernel}")
    windows = sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + nd)))
    windows = windows[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
    out_shape = tuple(windows.shape[2:2 + nd])
    # (N, *out, C, *k)
    order = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    cols = windows.transpose(order).reshape(x.shape[0] * int(np.prod(out_shape)), -1)
    return cols, out_shape


def _conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                  stride: Tuple[int, ...], padding: Tuple[int, ...]) -> np.ndarray:
    """Cross-correlation with zero padding"""
    nd = weight.ndim - 2
    if x.ndim != nd + 2:
        raise NetworkError('shape-mismatch', f"expected {nd + 2}-D input, got shape {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise NetworkError('shape-mismatch', f"input has {x.shape[1]} channels, layer expects {weight.shape[1]}")
    cols, out_shape = _im2col(x, weight.shape[2:], stride, padding)
    out = cols @ weight.reshape(weight.shape[0], -1).T + bias
    out = out.reshape((x.shape[0],) + out_shape + (weight.shape[0],))
    return np.moveaxis(out, -1, 1)


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride=1, padding=0) -> np.ndarray:
    return _conv_forward(x, weight, bias, _tuple(stride, 2), _tuple(padding, 2))


def conv3d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride=1, padding=0) -> np.ndarray:
    return _conv_forward(x, weight, bias, _tuple(stride, 3), _tuple(padding, 3))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction"""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted.astype(np.float64))
    return (exp / exp.sum(axis=-1, keepdims=True)).astype(logits.dtype)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits"""
    shifted = logits.astype(np.float64) - np.max(logits, axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype)


class Layer:
    """Base layer; trainable layers fill `params` and `grads`"""

    kind = "Layer"

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return input_shape

    def config(self) -> dict:
        return {}

    def _require_cache(self):
        if self._cache is None:
            raise NetworkError('no-forward-cache', f"{self.kind}.backward called before forward")
        return self._cache


class ConvND(Layer):
    """Convolution over the trailing `ndim` axes"""

    ndim = 2

    def __init__(self, in_channels: int, out_channels: int, kernel=3, stride=1, padding=0,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = _tuple(kernel, self.ndim)
        self.stride = _tuple(stride, self.ndim)
        self.padding = _tuple(padding, self.ndim)
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise NetworkError('invalid-layer', f"bad convolution geometry k={self.kernel} s={self.stride} p={self.padding}")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * int(np.prod(self.kernel))
        limit = np.sqrt(6.0 / fan_in)
        self.params["weight"] = rng.uniform(-limit, limit, (out_channels, in_channels) + self.kernel).astype(dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = _conv_forward(x, self.params["weight"], self.params["bias"], self.stride, self.padding)
        self._cache = (x, out.shape)
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x, out_shape = self._require_cache()
        x_shape = x.shape
        weight = self.params["weight"]
        nd = self.ndim
        cols, _ = _im2col(x, self.kernel, self.stride, self.padding)
        dm = np.moveaxis(grad, 1, -1).reshape(-1, self.out_channels)
        self.grads["weight"] = (dm.T @ cols).reshape(weight.shape).astype(weight.dtype)
        self.grads["bias"] = dm.sum(axis=0, dtype=np.float64).astype(weight.dtype)

        out_spatial = out_shape[2:]
        dcols = (dm @ weight.reshape(self.out_channels, -1)).reshape(
            (x_shape[0],) + tuple(out_spatial) + (self.in_channels,) + self.kernel)
        padded_shape = x_shape[:2] + tuple(x_shape[2 + d] + 2 * self.padding[d] for d in range(nd))
        dxp = np.zeros(padded_shape, dtype=grad.dtype)
        for offset in np.ndindex(*self.kernel):
            target = (slice(None), slice(None)) + tuple(
                slice(offset[d], offset[d] + self.stride[d] * out_spatial[d], self.stride[d]) for d in range(nd))
            dxp[target] += np.moveaxis(dcols[(Ellipsis,) + offset], -1, 1)
        crop = (slice(None), slice(None)) + tuple(
            slice(self.padding[d], self.padding[d] + x_shape[2 + d]) for d in range(nd))
        return dxp[crop]

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if len(input_shape) != self.ndim + 1 or input_shape[0] != self.in_channels:
            raise NetworkError('shape-mismatch', f"{self.kind} expects ({self.in_channels}, ...) with "
                                                 f"{self.ndim} spatial axes, got {input_shape}")
        spatial = tuple((input_shape[1 + d] + 2 * self.padding[d] - self.kernel[d]) // self.stride[d] + 1
                        for d in range(self.ndim))
        if min(spatial) < 1:
            raise NetworkError('shape-mismatch', f"{self.kind} output would be empty for input {input_shape}")
        return (self.out_channels,) + spatial

    def config(self) -> dict:
        return {"in_channels": self.in_channels, "out_channels": self.out_channels, "kernel": list(self.kernel),
                "stride": list(self.stride), "padding": list(self.padding)}


class Conv2D(ConvND):
    kind = "Conv2D"
    ndim = 2


class Conv3D(ConvND):
    kind = "Conv3D"
    ndim = 3


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x: np.ndarray) -> np.ndarray:
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad * self._require_cache()


class GlobalAvgPool(Layer):
    """Mean over every axis after the channel axis"""
    kind = "GlobalAvgPool"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x.shape
        axes = tuple(range(2, x.ndim))
        return x.mean(axis=axes, dtype=np.float64).astype(x.dtype)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        shape = self._require_cache()
        count = int(np.prod(shape[2:]))
        expanded = grad.reshape(grad.shape + (1,) * (len(shape) - 2))
        return np.broadcast_to(expanded / count, shape).astype(grad.dtype)

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return (input_shape[0],)


class Dense(Layer):
    kind = "Dense"

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        limit = np.sqrt(6.0 / in_features)
        self.params["weight"] = rng.uniform(-limit, limit, (out_features, in_features)).astype(dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise NetworkError('shape-mismatch', f"Dense expects (N, {self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x = self._require_cache()
        weight = self.params["weight"]
        self.grads["weight"] = (grad.T @ x).astype(weight.dtype)
        self.grads["bias"] = grad.sum(axis=0, dtype=np.float64).astype(weight.dtype)
        return grad @ weight

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if input_shape != (self.in_features,):
            raise NetworkError('shape-mismatch', f"Dense expects ({self.in_features},), got {input_shape}")
        return (self.out_features,)

    def config(self) -> dict:
        return {"in_features": self.in_features, "out_features": self.out_features}


LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, Conv3D, ReLU, GlobalAvgPool, Dense)}


class Model:
    """Ordered layer stack, optionally with a global input-to-output skip"""

    def __init__(self, layers: Sequence[Layer], global_residual: bool = False,
                 metadata: Optional[dict] = None, dtype=np.float32):
        if not layers:
            raise NetworkError('invalid-model', "a model needs at least one layer")
        self.layers = list(layers)
        self.global_residual = global_residual
        self.metadata = dict(metadata or {})
        self.dtype = np.dtype(dtype)
        self.training_log: List[dict] = []
        self._adam_m: Optional[List[np.ndarray]] = None
        self._adam_v: Optional[List[np.ndarray]] = None
        self._adam_t = 0

    def parameters(self) -> List[Tuple[str, np.ndarray]]:
        return [(f"{i}.{name}", layer.params[name])
                for i, layer in enumerate(self.layers) for name in sorted(layer.params)]

    def check_shapes(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        """Validate that layer shapes chain; returns the output shape (without batch)"""
        shape = tuple(input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if self.global_residual and shape != tuple(input_shape):
            raise NetworkError('shape-mismatch', f"residual model maps {input_shape} to {shape}")
        return shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = as_tensor(x, self.dtype)
        out = x
        for layer in self.layers:
            out = layer.forward(out)
        if self.global_residual:
            out = out + x
        return out

    def backward(self, loss_grad: np.ndarray) -> List[np.ndarray]:
        """Propagate d(loss)/d(output); returns gradients aligned with parameters()"""
        grad = np.asarray(loss_grad, dtype=self.dtype)
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return [self.layers[int(name.split('.')[0])].grads[name.split('.')[1]] for name, _ in self.parameters()]

    def predict(self, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
        return np.concatenate([self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.parameters())


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    return model.forward(x)


def backward(model: Model, loss_grad: np.ndarray) -> List[np.ndarray]:
    return model.backward(loss_grad)


def adam_step(model: Model, grads: List[np.ndarray], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> Model:
    """One bias-corrected ADAM update, applied in place"""
    params = model.parameters()
    if len(grads) != len(params):
        raise NetworkError('gradient-mismatch', f"{len(grads)} gradients for {len(params)} parameters")
    if model._adam_m is None:
        model._adam_m = [np.zeros_like(p, dtype=np.float64) for _, p in params]
        model._adam_v = [np.zeros_like(p, dtype=np.float64) for _, p in params]
        model._adam_t = 0
    model._adam_t += 1
    t = model._adam_t
    for (name, param), grad, m, v in zip(params, grads, model._adam_m, model._adam_v):
        if grad.shape != param.shape:
            raise NetworkError('gradient-mismatch', f"gradient for {name} has shape {grad.shape}, expected {param.shape}")
        g = grad.astype(np.float64)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)
    return model


def save_checkpoint(model: Model, path: str) -> None:
    params = model.parameters()
    header = {
        "dtype": model.dtype.name,
        "global_residual": model.global_residual,
        "metadata": model.metadata,
        "layers": [{"type": layer.kind, "config": layer.config()} for layer in model.layers],
        "params": [{"name": name, "shape": list(p.shape)} for name, p in params],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    blob_dtype = model.dtype.newbyteorder('<')
    chunks = [CHECKPOINT_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)), header_bytes]
    chunks.extend(np.ascontiguousarray(p, dtype=blob_dtype).tobytes() for _, p in params)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(b"".join(chunks))
    logger.info(f"💾 Saved checkpoint with {model.num_parameters()} parameters to {path}")


def load_checkpoint(path: str) -> Model:
    try:
        with open(os.path.expanduser(path), 'rb') as f:
            data = f.read()
    except OSError as e:
        raise NetworkError('io-failure', f"cannot read checkpoint {path}: {e}") from e
    if len(data) < CHECKPOINT_PREAMBLE.size:
        raise NetworkError('corrupt-checkpoint', f"{path}: file too short")
    magic, version, header_len = CHECKPOINT_PREAMBLE.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise NetworkError('corrupt-checkpoint', f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise NetworkError('corrupt-checkpoint', f"{path}: unsupported checkpoint version {version}")
    offset = CHECKPOINT_PREAMBLE.size
    try:
        header = json.loads(data[offset:offset + header_len].decode('utf-8'))
        dtype = np.dtype(header["dtype"])
        layers = []
        for spec in header["layers"]:
            cls = LAYER_TYPES[spec["type"]]
            layers.append(cls(**spec["config"], dtype=dtype) if spec["config"] else cls())
        model = Model(layers, bool(header["global_residual"]), header["metadata"], dtype)
    except (ValueError, KeyError, TypeError) as e:
        raise NetworkError('corrupt-checkpoint', f"{path}: malformed header: {e}") from e
    offset += header_len

    blob_dtype = dtype.newbyteorder('<')
    if len(header["params"]) != len(model.parameters()):
        raise NetworkError('corrupt-checkpoint', f"{path}: parameter list does not match the layer stack")
    for (name, param), spec in zip(model.parameters(), header["params"]):
        if spec["name"] != name or tuple(spec["shape"]) != param.shape:
            raise NetworkError('corrupt-checkpoint', f"{path}: parameter {spec['name']} does not match the layer stack")
        nbytes = param.size * blob_dtype.itemsize
        if offset + nbytes > len(data):
            raise NetworkError('corrupt-checkpoint', f"{path}: truncated at parameter {name} (offset {offset})")
        param[...] = np.frombuffer(data, dtype=blob_dtype, count=param.size, offset=offset).reshape(param.shape)
        offset += nbytes
    if offset != len(data):
        raise NetworkError('corrupt-checkpoint', f"{path}: {len(data) - offset} trailing bytes")
    return model
