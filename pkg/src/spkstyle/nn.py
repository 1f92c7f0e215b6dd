"""Small layer library with explicit forward/backward passes.

Layers cache their forward inputs when ``train=True`` and release them on
``backward``; inference calls with ``train=False`` are pure and safe to run
concurrently.  Gradients accumulate into ``Param.grad`` so several loss terms
can backpropagate into shared layers before one optimizer step.
"""

from __future__ import annotations

import math

import numpy as np

from . import backend

LEAKY_SLOPE = 0.2


class Param:
    """A named trainable array paired with its accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)


def he_std(fan_in: int, slope: float = LEAKY_SLOPE) -> float:
    return math.sqrt(2.0 / ((1.0 + slope * slope) * fan_in))


class Layer:
    def params(self) -> list[Param]:
        return []

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError

    def __call__(self, x, train=True):
        return self.forward(x, train=train)


class Conv1d(Layer):
    """Stride-``s`` 1-D convolution over ``(B, T, C)`` arrays, zero padded."""

    def __init__(self, c_in, c_out, kernel, stride=1, *, rng, dtype, pad=None, name="conv"):
        self.stride = stride
        self.kernel = kernel
        self.pad = kernel // 2 if pad is None else pad
        std = he_std(kernel * c_in)
        self.w = Param(f"{name}.w", rng.normal(0.0, std, (kernel, c_in, c_out)).astype(dtype))
        self.b = Param(f"{name}.b", np.zeros(c_out, dtype=dtype))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=True):
        if train:
            self._x = x
        return backend.conv1d_forward(x, self.w.value, self.b.value, self.stride, self.pad)

    def backward(self, gy):
        x, self._x = self._x, None
        self.w.grad += backend.conv1d_backward_weight(x, gy, self.stride, self.pad, self.kernel)
        self.b.grad += gy.sum(axis=(0, 1))
        return backend.conv1d_backward_input(gy, self.w.value, self.stride, self.pad, x.shape[1])


class ConvTranspose1d(Layer):
    """Transposed 1-D convolution; with kernel 4 / stride 2 / pad 1 it doubles T.

    Implemented through the convolution kernels by duality: the forward map is
    a convolution's input-gradient, the backward maps are its forward and
    weight-gradient with roles swapped.
    """

    def __init__(self, c_in, c_out, kernel=4, stride=2, pad=1, *, rng, dtype, name="tconv"):
        self.stride = stride
        self.kernel = kernel
        self.pad = pad
        std = he_std(kernel * c_in // stride)
        self.w = Param(f"{name}.w", rng.normal(0.0, std, (kernel, c_out, c_in)).astype(dtype))
        self.b = Param(f"{name}.b", np.zeros(c_out, dtype=dtype))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def out_len(self, t_in: int) -> int:
        return (t_in - 1) * self.stride - 2 * self.pad + self.kernel

    def forward(self, x, train=True):
        if train:
            self._x = x
        y = backend.conv1d_backward_input(x, self.w.value, self.stride, self.pad, self.out_len(x.shape[1]))
        return y + self.b.value

    def backward(self, gy):
        x, self._x = self._x, None
        self.w.grad += backend.conv1d_backward_weight(gy, x, self.stride, self.pad, self.kernel)
        self.b.grad += gy.sum(axis=(0, 1))
        zero = np.zeros(x.shape[2], dtype=gy.dtype)
        return backend.conv1d_forward(gy, self.w.value, zero, self.stride, self.pad)


class Linear(Layer):
    """Affine map over the trailing axis; applied frame-wise on (B, T, C)."""

    def __init__(self, c_in, c_out, *, rng, dtype, name="fc"):
        std = he_std(c_in)
        self.w = Param(f"{name}.w", rng.normal(0.0, std, (c_in, c_out)).astype(dtype))
        self.b = Param(f"{name}.b", np.zeros(c_out, dtype=dtype))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=True):
        if train:
            self._x = x
        return x @ self.w.value + self.b.value

    def backward(self, gy):
        x, self._x = self._x, None
        x2 = x.reshape(-1, x.shape[-1])
        g2 = gy.reshape(-1, gy.shape[-1])
        self.w.grad += x2.T @ g2
        self.b.grad += g2.sum(axis=0)
        return gy @ self.w.value.T


class LeakyReLU(Layer):
    def __init__(self, slope=LEAKY_SLOPE):
        self.slope = slope
        self._pos = None

    def forward(self, x, train=True):
        pos = x > 0
        if train:
            self._pos = pos
        return np.where(pos, x, self.slope * x)

    def backward(self, gy):
        pos, self._pos = self._pos, None
        return np.where(pos, gy, self.slope * gy)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, gy):
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy


def global_average_pool(x: np.ndarray) -> np.ndarray:
    """Mean over the time axis: (B, T, C) -> (B, C)."""
    return x.mean(axis=1)


def global_average_pool_backward(g: np.ndarray, t: int) -> np.ndarray:
    return np.repeat(g[:, None, :] / t, t, axis=1)


class Adam:
    """Adaptive-moment optimizer over a fixed parameter list."""

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/t": np.array(self.t, dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}/m{i}"] = m
            out[f"{prefix}/v{i}"] = v
        return out

    def load_state_arrays(self, prefix: str, arrays) -> None:
        self.t = int(arrays[f"{prefix}/t"])
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"{prefix}/m{i}"]
            self.v[i][...] = arrays[f"{prefix}/v{i}"]
