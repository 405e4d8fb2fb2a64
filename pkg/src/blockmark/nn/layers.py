"""Layer implementations with hand-written forward and backward passes.

Every layer follows the same protocol: ``forward(params, buffers, x, train)``
returns ``(y, cache)`` and ``backward(params, cache, dy)`` returns
``(dx, grads)``. Parameters live in the model's flat name->array dict under
``<layer name>.<field>``; layers themselves hold only configuration.
Arithmetic stays in the dtype of the incoming arrays, so the same code runs
in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatchError


class Conv2d:
    """3x3-style convolution, stride 1, symmetric zero padding, via im2col."""

    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel: int = 3, pad: int = 1):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.pad = pad

    @property
    def param_names(self):
        return (f"{self.name}.weight", f"{self.name}.bias")

    @property
    def prunable_names(self):
        return (f"{self.name}.weight",)

    def init_params(self, rng: np.random.Generator, dtype) -> dict:
        fan_in = self.in_channels * self.kernel * self.kernel
        bound = np.sqrt(6.0 / fan_in)
        weight = rng.uniform(
            -bound, bound,
            size=(self.out_channels, self.in_channels, self.kernel, self.kernel),
        )
        return {
            f"{self.name}.weight": weight.astype(dtype),
            f"{self.name}.bias": np.zeros(self.out_channels, dtype=dtype),
        }

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        b = x.shape[0]
        if self.pad:
            x = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        win = np.lib.stride_tricks.sliding_window_view(
            x, (self.kernel, self.kernel), axis=(2, 3)
        )
        # (B, C, Ho, Wo, k, k) -> (B, C*k*k, Ho*Wo)
        ho, wo = win.shape[2], win.shape[3]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(
            b, self.in_channels * self.kernel * self.kernel, ho * wo
        )
        return np.ascontiguousarray(cols), ho, wo

    def forward(self, params, buffers, x, train):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatchError(
                f"{self.name}: expected input (n, {self.in_channels}, h, w), "
                f"got {x.shape}"
            )
        w = params[f"{self.name}.weight"]
        bias = params[f"{self.name}.bias"]
        cols, ho, wo = self._im2col(x)
        w2 = w.reshape(self.out_channels, -1)
        y = np.einsum("ok,bkl->bol", w2, cols) + bias[None, :, None]
        y = y.reshape(x.shape[0], self.out_channels, ho, wo)
        cache = (x.shape, cols) if train else None
        return y, cache

    def backward(self, params, cache, dy):
        x_shape, cols = cache
        b, _, h, w_in = x_shape
        ho, wo = dy.shape[2], dy.shape[3]
        w2 = params[f"{self.name}.weight"].reshape(self.out_channels, -1)
        dyf = dy.reshape(b, self.out_channels, ho * wo)
        dw = np.einsum("bol,bkl->ok", dyf, cols).reshape(
            params[f"{self.name}.weight"].shape
        )
        db = dyf.sum(axis=(0, 2))
        dcols = np.einsum("ok,bol->bkl", w2, dyf).reshape(
            b, self.in_channels, self.kernel, self.kernel, ho * wo
        )
        dx_pad = np.zeros(
            (b, self.in_channels, h + 2 * self.pad, w_in + 2 * self.pad),
            dtype=dy.dtype,
        )
        for ki in range(self.kernel):
            for kj in range(self.kernel):
                dx_pad[:, :, ki : ki + ho, kj : kj + wo] += dcols[
                    :, :, ki, kj, :
                ].reshape(b, self.in_channels, ho, wo)
        p = self.pad
        dx = dx_pad[:, :, p : p + h, p : p + w_in] if p else dx_pad
        return np.ascontiguousarray(dx), {
            f"{self.name}.weight": dw,
            f"{self.name}.bias": db,
        }


class BatchNorm2d:
    """Per-channel batch normalization with running statistics.

    Training mode normalizes with biased batch moments and updates the
    running buffers as ``r <- (1 - momentum) * r + momentum * batch_stat``;
    inference mode uses the stored buffers.
    """

    eps = 1e-5
    momentum = 0.1

    def __init__(self, name: str, channels: int):
        self.name = name
        self.channels = channels

    @property
    def param_names(self):
        return (f"{self.name}.gamma", f"{self.name}.beta")

    @property
    def prunable_names(self):
        return ()

    @property
    def buffer_names(self):
        return (f"{self.name}.running_mean", f"{self.name}.running_var")

    def init_params(self, rng, dtype) -> dict:
        return {
            f"{self.name}.gamma": np.ones(self.channels, dtype=dtype),
            f"{self.name}.beta": np.zeros(self.channels, dtype=dtype),
        }

    def init_buffers(self, dtype) -> dict:
        return {
            f"{self.name}.running_mean": np.zeros(self.channels, dtype=dtype),
            f"{self.name}.running_var": np.ones(self.channels, dtype=dtype),
        }

    def forward(self, params, buffers, x, train):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatchError(
                f"{self.name}: expected input (n, {self.channels}, h, w), "
                f"got {x.shape}"
            )
        gamma = params[f"{self.name}.gamma"][None, :, None, None]
        beta = params[f"{self.name}.beta"][None, :, None, None]
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            rm = buffers[f"{self.name}.running_mean"]
            rv = buffers[f"{self.name}.running_var"]
            rm *= 1.0 - self.momentum
            rm += self.momentum * mean.astype(rm.dtype)
            rv *= 1.0 - self.momentum
            rv += self.momentum * var.astype(rv.dtype)
        else:
            mean = buffers[f"{self.name}.running_mean"].astype(x.dtype)
            var = buffers[f"{self.name}.running_var"].astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(self.eps))
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = gamma * xhat + beta
        cache = (xhat, inv_std) if train else None
        return y, cache

    def backward(self, params, cache, dy):
        xhat, inv_std = cache
        gamma = params[f"{self.name}.gamma"]
        n = dy.shape[0] * dy.shape[2] * dy.shape[3]
        dgamma = (dy * xhat).sum(axis=(0, 2, 3))
        dbeta = dy.sum(axis=(0, 2, 3))
        dxhat = dy * gamma[None, :, None, None]
        # Batch statistics couple every element of a channel.
        sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (
            inv_std[None, :, None, None]
            / n
            * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        )
        return dx.astype(dy.dtype), {
            f"{self.name}.gamma": dgamma,
            f"{self.name}.beta": dbeta,
        }


class ReLU:
    param_names = ()
    prunable_names = ()

    def __init__(self, name: str = "relu"):
        self.name = name

    def forward(self, params, buffers, x, train):
        y = np.maximum(x, 0)
        return y, (x > 0) if train else None

    def backward(self, params, cache, dy):
        return dy * cache, {}


class MaxPool2d:
    """Non-overlapping max pooling; ties route the gradient to the first max."""

    param_names = ()
    prunable_names = ()

    def __init__(self, name: str = "pool", size: int = 2):
        self.name = name
        self.size = size

    def forward(self, params, buffers, x, train):
        b, c, h, w = x.shape
        s = self.size
        if h % s or w % s:
            raise ShapeMismatchError(
                f"{self.name}: spatial dims {h}x{w} not divisible by {s}"
            )
        windows = (
            x.reshape(b, c, h // s, s, w // s, s)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h // s, w // s, s * s)
        )
        idx = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        cache = (x.shape, idx) if train else None
        return np.ascontiguousarray(y), cache

    def backward(self, params, cache, dy):
        x_shape, idx = cache
        b, c, h, w = x_shape
        s = self.size
        flat = np.zeros((b, c, h // s, w // s, s * s), dtype=dy.dtype)
        np.put_along_axis(flat, idx[..., None], dy[..., None], axis=-1)
        dx = (
            flat.reshape(b, c, h // s, w // s, s, s)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h, w)
        )
        return np.ascontiguousarray(dx), {}


class Flatten:
    param_names = ()
    prunable_names = ()

    def __init__(self, name: str = "flatten"):
        self.name = name

    def forward(self, params, buffers, x, train):
        y = x.reshape(x.shape[0], -1)
        return y, x.shape if train else None

    def backward(self, params, cache, dy):
        return dy.reshape(cache), {}


class Dense:
    """Fully connected layer, weight shape (out_features, in_features)."""

    def __init__(self, name: str, in_features: int, out_features: int):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features

    @property
    def param_names(self):
        return (f"{self.name}.weight", f"{self.name}.bias")

    @property
    def prunable_names(self):
        return (f"{self.name}.weight",)

    def init_params(self, rng, dtype) -> dict:
        bound = np.sqrt(6.0 / self.in_features)
        weight = rng.uniform(
            -bound, bound, size=(self.out_features, self.in_features)
        )
        return {
            f"{self.name}.weight": weight.astype(dtype),
            f"{self.name}.bias": np.zeros(self.out_features, dtype=dtype),
        }

    def forward(self, params, buffers, x, train):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatchError(
                f"{self.name}: expected input (n, {self.in_features}), got {x.shape}"
            )
        w = params[f"{self.name}.weight"]
        y = x @ w.T + params[f"{self.name}.bias"]
        return y, x if train else None

    def backward(self, params, cache, dy):
        x = cache
        w = params[f"{self.name}.weight"]
        return dy @ w, {
            f"{self.name}.weight": dy.T @ x,
            f"{self.name}.bias": dy.sum(axis=0),
        }


_LAYER_KINDS = {
    "conv": lambda spec: Conv2d(
        spec["name"],
        spec["in_channels"],
        spec["out_channels"],
        kernel=spec.get("kernel", 3),
        pad=spec.get("pad", 1),
    ),
    "batchnorm": lambda spec: BatchNorm2d(spec["name"], spec["channels"]),
    "relu": lambda spec: ReLU(spec.get("name", "relu")),
    "maxpool": lambda spec: MaxPool2d(
        spec.get("name", "pool"), size=spec.get("size", 2)
    ),
    "flatten": lambda spec: Flatten(spec.get("name", "flatten")),
    "dense": lambda spec: Dense(
        spec["name"], spec["in_features"], spec["out_features"]
    ),
}


def build_layers(architecture: list[dict]):
    """Instantiate layer objects from an architecture descriptor list."""
    layers = []
    seen = set()
    for i, spec in enumerate(architecture):
        kind = spec.get("kind")
        if kind not in _LAYER_KINDS:
            raise ValueError(f"architecture entry {i}: unknown layer kind {kind!r}")
        try:
            layer = _LAYER_KINDS[kind](spec)
        except KeyError as e:
            raise ValueError(f"architecture entry {i} ({kind}): missing field {e}")
        if layer.param_names:
            if layer.name in seen:
                raise ValueError(f"duplicate layer name {layer.name!r}")
            seen.add(layer.name)
        layers.append(layer)
    return layers
