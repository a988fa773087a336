"""
Layer zoo for the reverse-mode engine.

Every layer caches what it needs during forward() and accumulates parameter
gradients during backward(), so a layer shared by several heads can receive
several backward calls per step. Shapes passed to output_shape() and macs()
describe a single example (no batch axis).
"""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.core.exceptions import (
    BackwardBeforeForwardError,
    NonFiniteError,
    ShapeMismatchError,
)

Shape = Tuple[int, ...]


def _check_finite(array: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"Non-finite values produced by {where}")


def _expect_chw(shape: Shape, kind: str) -> Tuple[int, int, int]:
    if len(shape) != 3:
        raise ShapeMismatchError(f"{kind} expects a C x H x W input, got shape {tuple(shape)}")
    return shape[0], shape[1], shape[2]


def he_normal(rng: np.random.Generator, shape: Shape, fan_in: int, dtype) -> np.ndarray:
    """Fan-in scaled Gaussian initialization."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    """
    Base class for all layers.

    Subclasses implement _forward/_backward; the public methods add the
    finiteness checks and the backward-before-forward guard.
    """

    kind = "layer"

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.training = True
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = self._forward(x)
        _check_finite(out, f"{self.kind} forward")
        return out

    def backward(self, upstream_grad: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise BackwardBeforeForwardError(f"{self.kind}: backward() called before forward()")
        downstream = self._backward(upstream_grad)
        _check_finite(downstream, f"{self.kind} backward")
        return downstream

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def _forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _backward(self, upstream_grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for grad in self.grads.values():
            grad.fill(0.0)

    def train(self) -> None:
        self.training = True

    def eval(self) -> None:
        self.training = False

    def buffers(self) -> Dict[str, np.ndarray]:
        """Non-trainable state that must be checkpointed."""
        return {}

    def output_shape(self, input_shape: Shape) -> Shape:
        return tuple(input_shape)

    def macs(self, input_shape: Shape) -> int:
        return 0

    def _init_grads(self) -> None:
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}


class Conv2D(Layer):
    """2-D convolution with square kernels, zero padding and stride."""

    kind = "conv"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        padding: int = 0,
        stride: int = 1,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = padding
        self.stride = stride
        fan_in = in_channels * kernel_size * kernel_size
        self.params["weight"] = he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self._init_grads()

    def output_shape(self, input_shape: Shape) -> Shape:
        c, h, w = _expect_chw(input_shape, self.kind)
        if c != self.in_channels:
            raise ShapeMismatchError(f"conv expects {self.in_channels} channels, got {c}")
        k, p, s = self.kernel_size, self.padding, self.stride
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho <= 0 or wo <= 0:
            raise ShapeMismatchError(f"conv kernel {k} does not fit input {h}x{w} with padding {p}")
        return (self.out_channels, ho, wo)

    def macs(self, input_shape: Shape) -> int:
        _, ho, wo = self.output_shape(input_shape)
        return self.out_channels * self.in_channels * self.kernel_size ** 2 * ho * wo

    def _forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeMismatchError(f"conv expects N x C x H x W input, got shape {x.shape}")
        self.output_shape(x.shape[1:])
        k, p, s = self.kernel_size, self.padding, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        # N, C, Ho, Wo, k, k
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        out = np.tensordot(windows, self.params["weight"], axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + self.params["bias"][None, :, None, None]
        self._cache = (x.shape, windows)
        return np.ascontiguousarray(out)

    def _backward(self, upstream_grad: np.ndarray) -> np.ndarray:
        x_shape, windows = self._cache
        weight = self.params["weight"]
        k, p, s = self.kernel_size, self.padding, self.stride
        self.grads["weight"] += np.tensordot(upstream_grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        self.grads["bias"] += upstream_grad.sum(axis=(0, 2, 3))

        n, c, h, w = x_shape
        ho, wo = upstream_grad.shape[2], upstream_grad.shape[3]
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=upstream_grad.dtype)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(upstream_grad, weight[:, :, i, j], axes=([1], [0]))
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += contrib.transpose(0, 3, 1, 2)
        if p:
            return dxp[:, :, p:p + h, p:p + w]
        return dxp


class FullyConnected(Layer):
    """Affine layer y = xW + b; inputs with more than two axes are flattened."""

    kind = "fc"

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.params["weight"] = he_normal(rng, (in_features, out_features), in_features, dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self._init_grads()

    def output_shape(self, input_shape: Shape) -> Shape:
        if int(np.prod(input_shape)) != self.in_features:
            raise ShapeMismatchError(
                f"fc expects {self.in_features} input features, got shape {tuple(input_shape)}"
            )
        return (self.out_features,)

    def macs(self, input_shape: Shape) -> int:
        self.output_shape(input_shape)
        return self.in_features * self.out_features

    def _forward(self, x: np.ndarray) -> np.ndarray:
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise ShapeMismatchError(f"fc expects {self.in_features} input features, got {flat.shape[1]}")
        self._cache = (x.shape, flat)
        return flat @ self.params["weight"] + self.params["bias"]

    def _backward(self, upstream_grad: np.ndarray) -> np.ndarray:
        x_shape, flat = self._cache
        self.grads["weight"] += flat.T @ upstream_grad
        self.grads["bias"] += upstream_grad.sum(axis=0)
        return (upstream_grad @ self.params["weight"].T).reshape(x_shape)


class ReLU(Layer):
    kind = "relu"

    def _forward(self, x: np.ndarray) -> np.ndarray:
        mask = x > 0
        self._cache = mask
        return np.maximum(x, 0)

    def _backward(self, upstream_grad: np.ndarray) -> np.ndarray:
        return upstream_grad * self._cache


class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""

    kind = "maxpool"

    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def output_shape(self, input_shape: Shape) -> Shape:
        c, h, w = _expect_chw(input_shape, self.kind)
        if h < self.size or w < self.size:
            raise ShapeMismatchError(f"maxpool window {self.size} larger than input {h}x{w}")
        return (c, h // self.size, w // self.size)

    def _forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeMismatchError(f"maxpool expects N x C x H x W input, got shape {x.shape}")
        _, ho, wo = self.output_shape(x.shape[1:])
        n, c = x.shape[:2]
        k = self.size
        cols = (
            x[:, :, :ho * k, :wo * k]
            .reshape(n, c, ho, k, wo, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho, wo, k * k)
        )
        # argmax picks the first maximum, so ties route the gradient to one element
        idx = cols.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(cols, idx[..., None], axis=-1)[..., 0]

    def _backward(self, upstream_grad: np.ndarray) -> np.ndarray:
        x_shape, idx = self._cache
        n, c, ho, wo = upstream_grad.shape
        k = self.size
        cols = np.zeros((n, c, ho, wo, k * k), dtype=upstream_grad.dtype)
        np.put_along_axis(cols, idx[..., None], upstream_grad[..., None], axis=-1)
        dx = np.zeros(x_shape, dtype=upstream_grad.dtype)
        dx[:, :, :ho * k, :wo * k] = (
            cols.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        )
        return dx


class AvgPoolGlobal(Layer):
    """Average over the spatial axes: N x C x H x W -> N x C."""

    kind = "avgpool_global"

    def output_shape(self, input_shape: Shape) -> Shape:
        c, _, _ = _expect_chw(input_shape, self.kind)
        return (c,)

    def _forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeMismatchError(f"global average pooling expects N x C x H x W input, got {x.shape}")
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def _backward(self, upstream_grad: np.ndarray) -> np.ndarray:
        n, c, h, w = self._cache
        return np.broadcast_to(upstream_grad[:, :, None, None] / (h * w), (n, c, h, w)).copy()


def grid_bounds(extent: int, cells: int) -> List[int]:
    """Floor split of `extent` into `cells` near-equal, non-empty ranges."""
    return [(i * extent) // cells for i in range(cells + 1)]


class AvgPoolGrid(Layer):
    """
    Average pooling over a fixed grid of regions (4 x 4 by default).

    Output is flattened to N x (C * grid * grid), ordered channel-major.
    """

    kind = "avgpool_grid"

    def __init__(self, grid: int = 4):
        super().__init__()
        self.grid = grid

    def output_shape(self, input_shape: Shape) -> Shape:
        c, h, w = _expect_chw(input_shape, self.kind)
        if h < self.grid or w < self.grid:
            raise ShapeMismatchError(
                f"{self.grid}x{self.grid} average pooling needs spatial extent >= {self.grid}, got {h}x{w}"
            )
        return (c * self.grid * self.grid,)

    def _forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeMismatchError(f"grid average pooling expects N x C x H x W input, got {x.shape}")
        self.output_shape(x.shape[1:])
        n, c, h, w = x.shape
        g = self.grid
        hb, wb = grid_bounds(h, g), grid_bounds(w, g)
        out = np.empty((n, c, g, g), dtype=x.dtype)
        for i in range(g):
            for j in range(g):
                out[:, :, i, j] = x[:, :, hb[i]:hb[i + 1], wb[j]:wb[j + 1]].mean(axis=(2, 3))
        self._cache = (x.shape, hb, wb)
        return out.reshape(n, c * g * g)

    def _backward(self, upstream_grad: np.ndarray) -> np.ndarray:
        x_shape, hb, wb = self._cache
        n, c = x_shape[:2]
        g = self.grid
        grid_grad = upstream_grad.reshape(n, c, g, g)
        dx = np.zeros(x_shape, dtype=upstream_grad.dtype)
        for i in range(g):
            for j in range(g):
                area = (hb[i + 1] - hb[i]) * (wb[j + 1] - wb[j])
                dx[:, :, hb[i]:hb[i + 1], wb[j]:wb[j + 1]] = grid_grad[:, :, i, j][:, :, None, None] / area
        return dx


class BatchNorm(Layer):
    """
    Batch normalization over N (and H, W for 4-D inputs) per channel.

    Train mode normalizes with batch statistics and updates the running
    statistics by exponential moving average; eval mode uses the running
    statistics only.
    """

    kind = "batchnorm"

    def __init__(self, num_features: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(num_features, dtype=dtype)
        self.params["beta"] = np.zeros(num_features, dtype=dtype)
        self._init_grads()
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def output_shape(self, input_shape: Shape) -> Shape:
        if input_shape[0] != self.num_features:
            raise ShapeMismatchError(f"batchnorm expects {self.num_features} channels, got {input_shape[0]}")
        return tuple(input_shape)

    def macs(self, input_shape: Shape) -> int:
        # one fused scale-and-shift per element
        return int(np.prod(input_shape))

    @staticmethod
    def _axes(x: np.ndarray) -> Tuple[int, ...]:
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _channel(v: np.ndarray, ndim: int) -> np.ndarray:
        return v[None, :] if ndim == 2 else v[None, :, None, None]

    def _forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim not in (2, 4) or x.shape[1] != self.num_features:
            raise ShapeMismatchError(
                f"batchnorm expects N x {self.num_features}[ x H x W] input, got shape {x.shape}"
            )
        axes = self._axes(x)
        if self.training:
            if x.shape[0] < 2:
                raise ShapeMismatchError("batchnorm needs a batch of at least 2 examples in train mode")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean *= self.momentum
            self.running_mean += (1.0 - self.momentum) * mean
            self.running_var *= self.momentum
            self.running_var += (1.0 - self.momentum) * var
        else:
            mean, var = self.running_mean, self.running_var
        std = np.sqrt(var + self.eps)
        x_hat = (x - self._channel(mean, x.ndim)) / self._channel(std, x.ndim)
        self._cache = (x_hat, std, axes, self.training)
        gamma = self._channel(self.params["gamma"], x.ndim)
        beta = self._channel(self.params["beta"], x.ndim)
        return gamma * x_hat + beta

    def _backward(self, upstream_grad: np.ndarray) -> np.ndarray:
        x_hat, std, axes, batch_stats = self._cache
        ndim = upstream_grad.ndim
        self.grads["gamma"] += (upstream_grad * x_hat).sum(axis=axes)
        self.grads["beta"] += upstream_grad.sum(axis=axes)
        d_xhat = upstream_grad * self._channel(self.params["gamma"], ndim)
        inv_std = 1.0 / self._channel(std, ndim)
        if not batch_stats:
            return d_xhat * inv_std
        m = int(np.prod([upstream_grad.shape[a] for a in axes]))
        sum_d = d_xhat.sum(axis=axes, keepdims=True)
        sum_dx = (d_xhat * x_hat).sum(axis=axes, keepdims=True)
        return inv_std / m * (m * d_xhat - sum_d - x_hat * sum_dx)


class Sequential(Layer):
    """Chain of layers evaluated in order."""

    kind = "sequential"

    def __init__(self, layers: Sequence[Layer]):
        super().__init__()
        self.layers: List[Layer] = list(layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, upstream_grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            upstream_grad = layer.backward(upstream_grad)
        return upstream_grad

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def train(self) -> None:
        self.training = True
        for layer in self.layers:
            layer.train()

    def eval(self) -> None:
        self.training = False
        for layer in self.layers:
            layer.eval()

    def output_shape(self, input_shape: Shape) -> Shape:
        for layer in self.layers:
            input_shape = layer.output_shape(input_shape)
        return input_shape

    def macs(self, input_shape: Shape) -> int:
        total = 0
        for layer in self.layers:
            total += layer.macs(input_shape)
            input_shape = layer.output_shape(input_shape)
        return total
