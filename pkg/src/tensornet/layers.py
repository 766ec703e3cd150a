"""
Hand-differentiated layers over 4-axis arrays ``(batch, channel, row, col)``.

Every layer caches what its backward pass needs during a train-mode forward
and raises ``UsageError`` if ``backward`` is called without that cache.
Parameter gradients are overwritten (not accumulated) by each backward call.
"""

from __future__ import annotations

import logging
from typing import Any

import numpy as np
from scipy.special import expit

from ..errors import StructuralError, UsageError

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class Layer:
    kind: str = "layer"

    def __init__(self, name: str) -> None:
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache: Any = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _require_cache(self) -> Any:
        if self._cache is None:
            raise UsageError(f"layer '{self.name}': backward called without a train-mode forward")
        return self._cache

    def clear_cache(self) -> None:
        self._cache = None

    def _check_channels(self, x: np.ndarray, expected: int) -> None:
        if x.ndim != 4:
            raise StructuralError(f"layer '{self.name}': expected a 4-axis tensor, got shape {x.shape}")
        if x.shape[1] != expected:
            raise StructuralError(f"layer '{self.name}': expected {expected} input channels, got {x.shape[1]}")


class Conv2d(Layer):
    """Square-kernel correlation with zero "same" padding; kernel side must be odd."""

    kind = "conv2d"

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel: int,
        *,
        bias: bool = True,
        rng: np.random.Generator,
        dtype: np.dtype | type = np.float32,
    ) -> None:
        super().__init__(name)
        if kernel < 1 or kernel % 2 == 0:
            raise StructuralError(f"layer '{name}': kernel side must be odd, got {kernel}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.pad = kernel // 2
        fan_in = in_channels * kernel * kernel
        # He-normal
        weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, kernel, kernel))
        self.params["weight"] = weight.astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(out_channels, dtype=dtype)

    def _windows(self, xp: np.ndarray, height: int, width: int):
        for i in range(self.kernel):
            for j in range(self.kernel):
                yield i, j, xp[:, :, i : i + height, j : j + width]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._check_channels(x, self.in_channels)
        n, _, height, width = x.shape
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        weight = self.params["weight"]
        # (out, n, h, w) accumulated offset by offset, transposed once at the end
        acc = np.zeros((self.out_channels, n, height, width), dtype=np.result_type(x, weight))
        for i, j, window in self._windows(xp, height, width):
            acc += np.tensordot(weight[:, :, i, j], window, axes=([1], [1]))
        y = acc.transpose(1, 0, 2, 3)
        if "bias" in self.params:
            y = y + self.params["bias"][None, :, None, None]
        self._cache = xp if train else None
        return np.ascontiguousarray(y)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xp = self._require_cache()
        n, _, height, width = dy.shape
        p = self.pad
        weight = self.params["weight"]
        d_weight = np.zeros_like(weight)
        d_xp = np.zeros_like(xp)
        for i, j, window in self._windows(xp, height, width):
            d_weight[:, :, i, j] = np.tensordot(dy, window, axes=([0, 2, 3], [0, 2, 3]))
            # (n, h, w, in) -> (n, in, h, w)
            back = np.tensordot(dy, weight[:, :, i, j], axes=([1], [0]))
            d_xp[:, :, i : i + height, j : j + width] += back.transpose(0, 3, 1, 2)
        self.grads["weight"] = d_weight
        if "bias" in self.params:
            self.grads["bias"] = dy.sum(axis=(0, 2, 3)).astype(weight.dtype)
        return d_xp[:, :, p : p + height, p : p + width] if p else d_xp


class BatchNorm(Layer):
    kind = "batch_norm"

    def __init__(self, name: str, channels: int, *, dtype: np.dtype | type = np.float32) -> None:
        super().__init__(name)
        self.channels = channels
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._check_channels(x, self.channels)
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if not train:
            mean = self.buffers["running_mean"][None, :, None, None]
            var = self.buffers["running_var"][None, :, None, None]
            self._cache = None
            return (x - mean) / np.sqrt(var + BN_EPS) * gamma + beta

        # reductions in float64
        x64 = x.astype(np.float64)
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        x_hat = (x64 - mean[None, :, None, None]) * inv_std[None, :, None, None]
        dtype = self.buffers["running_mean"].dtype
        self.buffers["running_mean"] = (
            BN_MOMENTUM * self.buffers["running_mean"] + (1.0 - BN_MOMENTUM) * mean
        ).astype(dtype)
        self.buffers["running_var"] = (BN_MOMENTUM * self.buffers["running_var"] + (1.0 - BN_MOMENTUM) * var).astype(
            dtype
        )
        self._cache = (x_hat, inv_std)
        return (x_hat * gamma + beta).astype(x.dtype)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x_hat, inv_std = self._require_cache()
        dy64 = dy.astype(np.float64)
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        gamma = self.params["gamma"].astype(np.float64)
        d_beta = dy64.sum(axis=(0, 2, 3))
        d_gamma = (dy64 * x_hat).sum(axis=(0, 2, 3))
        self.grads["gamma"] = d_gamma.astype(self.params["gamma"].dtype)
        self.grads["beta"] = d_beta.astype(self.params["beta"].dtype)
        dx = (
            (gamma * inv_std)[None, :, None, None]
            / m
            * (m * dy64 - d_beta[None, :, None, None] - x_hat * d_gamma[None, :, None, None])
        )
        return dx.astype(dy.dtype)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        positive = x > 0
        self._cache = positive if train else None
        return np.where(positive, x, 0).astype(x.dtype)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        positive = self._require_cache()
        return np.where(positive, dy, 0).astype(dy.dtype)


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; the gradient flows to the first maximum of each window."""

    kind = "max_pool"

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        n, c, height, width = x.shape
        if height % 2 or width % 2:
            raise StructuralError(f"layer '{self.name}': spatial dims {height}x{width} not divisible by 2")
        windows = x.reshape(n, c, height // 2, 2, width // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        windows = windows.reshape(n, c, height // 2, width // 2, 4)
        argmax = windows.argmax(axis=-1)
        y = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
        self._cache = (argmax, x.shape) if train else None
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        argmax, shape = self._require_cache()
        n, c, height, width = shape
        d_windows = np.zeros((n, c, height // 2, width // 2, 4), dtype=dy.dtype)
        np.put_along_axis(d_windows, argmax[..., None], dy[..., None], axis=-1)
        d_windows = d_windows.reshape(n, c, height // 2, width // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return d_windows.reshape(shape)


class UpsampleNearest2(Layer):
    kind = "upsample_nearest"

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._cache = True if train else None
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self._require_cache()
        n, c, height, width = dy.shape
        return dy.reshape(n, c, height // 2, 2, width // 2, 2).sum(axis=(3, 5))


class Concat(Layer):
    """Channel concatenation ``[x, skip]``; the network feeds ``skip`` from an earlier layer's output."""

    kind = "concat"

    def __init__(self, name: str, skip: str) -> None:
        super().__init__(name)
        self.skip = skip

    def forward_pair(self, x: np.ndarray, skip: np.ndarray, train: bool) -> np.ndarray:
        if x.shape[0] != skip.shape[0] or x.shape[2:] != skip.shape[2:]:
            raise StructuralError(
                f"layer '{self.name}': cannot concatenate {x.shape} with skip '{self.skip}' of shape {skip.shape}"
            )
        self._cache = x.shape[1] if train else None
        return np.concatenate([x, skip], axis=1)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise UsageError(f"layer '{self.name}': concat needs its skip input, call forward_pair")

    def backward_pair(self, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        split = self._require_cache()
        return dy[:, :split], dy[:, split:]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise UsageError(f"layer '{self.name}': concat returns two gradients, call backward_pair")


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        y = expit(x)
        self._cache = y if train else None
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        y = self._require_cache()
        return dy * y * (1.0 - y)
