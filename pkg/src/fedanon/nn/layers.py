"""Layer kinds with hand-written forward/backward passes.

Every layer works on a leading batch axis.  Dense layers take ``(B, n)``;
convolutions take ``(B, C, L)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionMismatch

KINDS = ("dense", "conv1d", "conv_transpose1d", "relu", "leaky_relu", "sigmoid", "softmax", "flatten", "reshape")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int | None = None
    out_dim: int | None = None
    channels_in: int | None = None
    channels_out: int | None = None
    kernel: int | None = None
    stride: int = 1
    output_padding: int = 0
    init: str = "he"
    slope: float = 0.01
    shape: tuple[int, ...] | None = None
    gain: float = 1.0  # multiplies the init std

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.init not in ("he", "xavier"):
            raise ValueError(f"unknown init scheme {self.init!r}")


def dense(in_dim: int, out_dim: int, init: str = "he", gain: float = 1.0) -> LayerSpec:
    return LayerSpec("dense", in_dim=in_dim, out_dim=out_dim, init=init, gain=gain)


def conv1d(channels_in: int, channels_out: int, kernel: int, stride: int = 1, init: str = "he") -> LayerSpec:
    return LayerSpec("conv1d", channels_in=channels_in, channels_out=channels_out, kernel=kernel, stride=stride,
                     init=init)


def conv_transpose1d(channels_in: int, channels_out: int, kernel: int, stride: int = 1, output_padding: int = 0,
                     init: str = "he") -> LayerSpec:
    return LayerSpec("conv_transpose1d", channels_in=channels_in, channels_out=channels_out, kernel=kernel,
                     stride=stride, output_padding=output_padding, init=init)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def leaky_relu(slope: float = 0.01) -> LayerSpec:
    return LayerSpec("leaky_relu", slope=slope)


def sigmoid() -> LayerSpec:
    return LayerSpec("sigmoid")


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def reshape(*shape: int) -> LayerSpec:
    return LayerSpec("reshape", shape=tuple(shape))


def _fan_init(rng: np.random.Generator, scheme: str, fan_in: int, fan_out: int, shape, dtype,
              gain: float = 1.0) -> np.ndarray:
    if scheme == "he":
        std = np.sqrt(2.0 / fan_in)
    else:
        std = np.sqrt(2.0 / (fan_in + fan_out))
    return (rng.standard_normal(shape) * (gain * std)).astype(dtype)


class Layer:
    """Base layer: stateless apart from its spec; parameters live in a ParameterSet."""

    param_names: tuple[str, ...] = ()

    def __init__(self, spec: LayerSpec, index: int):
        self.spec = spec
        self.index = index

    def pname(self, short: str) -> str:
        return f"{self.index}.{short}"

    def out_shape(self, in_shape: tuple[int, ...] | None) -> tuple[int, ...] | None:
        return in_shape

    def init_params(self, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
        return {}

    def forward(self, p: dict[str, np.ndarray], x: np.ndarray) -> tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, p: dict[str, np.ndarray], cache: Any, dy: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        raise NotImplementedError


class Dense(Layer):
    param_names = ("weight", "bias")

    def out_shape(self, in_shape):
        s = self.spec
        if s.in_dim is None or s.out_dim is None or s.in_dim <= 0 or s.out_dim <= 0:
            raise DimensionMismatch(f"layer {self.index}: dense dims must be positive")
        if in_shape is not None and in_shape != (s.in_dim,):
            raise DimensionMismatch(f"layer {self.index}: dense expects ({s.in_dim},), got {in_shape}")
        return (s.out_dim,)

    def init_params(self, rng, dtype):
        s = self.spec
        return {"weight": _fan_init(rng, s.init, s.in_dim, s.out_dim, (s.in_dim, s.out_dim), dtype, s.gain),
                "bias": np.zeros(s.out_dim, dtype=dtype)}

    def forward(self, p, x):
        return x @ p["weight"] + p["bias"], x

    def backward(self, p, x, dy):
        return dy @ p["weight"].T, {"weight": x.T @ dy, "bias": dy.sum(axis=0)}


class Conv1d(Layer):
    """Valid 1-D cross-correlation; weight shape ``(C_out, C_in, K)``."""

    param_names = ("weight", "bias")

    def out_shape(self, in_shape):
        s = self.spec
        if not all(v and v > 0 for v in (s.channels_in, s.channels_out, s.kernel, s.stride)):
            raise DimensionMismatch(f"layer {self.index}: conv dims must be positive")
        if in_shape is None:
            return None
        if len(in_shape) != 2 or in_shape[0] != s.channels_in:
            raise DimensionMismatch(f"layer {self.index}: conv1d expects ({s.channels_in}, L), got {in_shape}")
        if s.kernel > in_shape[1]:
            raise DimensionMismatch(f"layer {self.index}: kernel {s.kernel} longer than input {in_shape[1]}")
        return (s.channels_out, (in_shape[1] - s.kernel) // s.stride + 1)

    def init_params(self, rng, dtype):
        s = self.spec
        fan_in, fan_out = s.channels_in * s.kernel, s.channels_out * s.kernel
        return {"weight": _fan_init(rng, s.init, fan_in, fan_out, (s.channels_out, s.channels_in, s.kernel), dtype,
                                     s.gain),
                "bias": np.zeros(s.channels_out, dtype=dtype)}

    def forward(self, p, x):
        s = self.spec
        # (B, C, L_out, K)
        win = sliding_window_view(x, s.kernel, axis=2)[:, :, ::s.stride, :]
        b, c, lo, k = win.shape
        cols = win.transpose(0, 2, 1, 3).reshape(b * lo, c * k)
        w = p["weight"].reshape(s.channels_out, c * k)
        y = (cols @ w.T).reshape(b, lo, s.channels_out).transpose(0, 2, 1) + p["bias"][None, :, None]
        return y, (x.shape, cols)

    def backward(self, p, cache, dy):
        s = self.spec
        x_shape, cols = cache
        b, c, length = x_shape
        lo = dy.shape[2]
        dy2 = dy.transpose(0, 2, 1).reshape(b * lo, s.channels_out)
        dw = (dy2.T @ cols).reshape(p["weight"].shape)
        dcols = (dy2 @ p["weight"].reshape(s.channels_out, -1)).reshape(b, lo, c, s.kernel)
        dx = np.zeros(x_shape, dtype=dy.dtype)
        stop = s.stride * (lo - 1) + 1
        for k in range(s.kernel):
            dx[:, :, k:k + stop:s.stride] += dcols[:, :, :, k].transpose(0, 2, 1)
        return dx, {"weight": dw, "bias": dy.sum(axis=(0, 2))}


class ConvTranspose1d(Layer):
    """Adjoint of :class:`Conv1d`; weight shape ``(C_in, C_out, K)``."""

    param_names = ("weight", "bias")

    def out_shape(self, in_shape):
        s = self.spec
        if not all(v and v > 0 for v in (s.channels_in, s.channels_out, s.kernel, s.stride)):
            raise DimensionMismatch(f"layer {self.index}: conv dims must be positive")
        if s.output_padding < 0 or s.output_padding >= max(s.stride, 1) + s.kernel:
            raise DimensionMismatch(f"layer {self.index}: bad output_padding {s.output_padding}")
        if in_shape is None:
            return None
        if len(in_shape) != 2 or in_shape[0] != s.channels_in:
            raise DimensionMismatch(
                f"layer {self.index}: conv_transpose1d expects ({s.channels_in}, L), got {in_shape}")
        return (s.channels_out, (in_shape[1] - 1) * s.stride + s.kernel + s.output_padding)

    def init_params(self, rng, dtype):
        s = self.spec
        fan_in, fan_out = s.channels_in * s.kernel, s.channels_out * s.kernel
        return {"weight": _fan_init(rng, s.init, fan_in, fan_out, (s.channels_in, s.channels_out, s.kernel), dtype,
                                     s.gain),
                "bias": np.zeros(s.channels_out, dtype=dtype)}

    def forward(self, p, x):
        s = self.spec
        b, c, length = x.shape
        lo = (length - 1) * s.stride + s.kernel + s.output_padding
        x2 = x.transpose(0, 2, 1).reshape(b * length, c)
        # (B, L, C_out, K)
        contrib = (x2 @ p["weight"].reshape(c, -1)).reshape(b, length, s.channels_out, s.kernel)
        y = np.zeros((b, s.channels_out, lo), dtype=x.dtype)
        stop = s.stride * (length - 1) + 1
        for k in range(s.kernel):
            y[:, :, k:k + stop:s.stride] += contrib[:, :, :, k].transpose(0, 2, 1)
        return y + p["bias"][None, :, None], x2

    def backward(self, p, x2, dy):
        s = self.spec
        b = dy.shape[0]
        length = x2.shape[0] // b
        c = s.channels_in
        win = sliding_window_view(dy, s.kernel, axis=2)[:, :, ::s.stride, :][:, :, :length, :]
        dcols = win.transpose(0, 2, 1, 3).reshape(b * length, s.channels_out * s.kernel)
        dw = (x2.T @ dcols).reshape(p["weight"].shape)
        dx = (dcols @ p["weight"].reshape(c, -1).T).reshape(b, length, c).transpose(0, 2, 1)
        return dx, {"weight": dw, "bias": dy.sum(axis=(0, 2))}


class ReLU(Layer):
    def forward(self, p, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, p, mask, dy):
        return dy * mask, {}


class LeakyReLU(Layer):
    def forward(self, p, x):
        mask = x > 0
        return np.where(mask, x, x * x.dtype.type(self.spec.slope)), mask

    def backward(self, p, mask, dy):
        return np.where(mask, dy, dy * dy.dtype.type(self.spec.slope)), {}


class Sigmoid(Layer):
    def forward(self, p, x):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return y.astype(x.dtype, copy=False), y

    def backward(self, p, y, dy):
        return dy * y * (1 - y), {}


class Softmax(Layer):
    """Softmax over the last axis."""

    def forward(self, p, x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)
        return y, y

    def backward(self, p, y, dy):
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True)), {}


class Flatten(Layer):
    def out_shape(self, in_shape):
        return None if in_shape is None else (int(np.prod(in_shape)),)

    def forward(self, p, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, shape, dy):
        return dy.reshape(shape), {}


class Reshape(Layer):
    def out_shape(self, in_shape):
        target = self.spec.shape
        if not target or any(d <= 0 for d in target):
            raise DimensionMismatch(f"layer {self.index}: reshape needs positive target dims")
        if in_shape is not None and int(np.prod(in_shape)) != int(np.prod(target)):
            raise DimensionMismatch(f"layer {self.index}: cannot reshape {in_shape} to {target}")
        return tuple(target)

    def forward(self, p, x):
        return x.reshape((x.shape[0],) + tuple(self.spec.shape)), x.shape

    def backward(self, p, shape, dy):
        return dy.reshape(shape), {}


LAYER_TYPES: dict[str, type[Layer]] = {
    "dense": Dense, "conv1d": Conv1d, "conv_transpose1d": ConvTranspose1d, "relu": ReLU,
    "leaky_relu": LeakyReLU, "sigmoid": Sigmoid, "softmax": Softmax, "flatten": Flatten, "reshape": Reshape,
}
