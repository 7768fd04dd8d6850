"""A small reverse-mode network engine: dense, 3x3 conv, 2x upsampling, activations.

Feature maps are channel-last, ``(batch, height, width, channel)``. All
parameters of a network live in one flat buffer and each layer holds views
into it, so flattening for the optimizer or a checkpoint is free and exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class Layer:
    n_params = 0

    def bind(self, params: np.ndarray, grads: np.ndarray) -> None:
        pass

    def init(self, rng: np.random.Generator) -> None:
        pass

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def describe(self) -> dict:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.n_params = self.n_in * self.n_out + self.n_out

    def bind(self, params, grads):
        k = self.n_in * self.n_out
        self.w = params[:k].reshape(self.n_in, self.n_out)
        self.b = params[k:]
        self.gw = grads[:k].reshape(self.n_in, self.n_out)
        self.gb = grads[k:]

    def init(self, rng):
        self.w[...] = rng.standard_normal(self.w.shape) * np.sqrt(2.0 / self.n_in)
        self.b[...] = 0

    def output_shape(self, shape):
        if shape != (self.n_in,):
            raise ValueError(f"dense layer expects ({self.n_in},), got {shape}")
        return (self.n_out,)

    def forward(self, x):
        self.x = x
        return x @ self.w + self.b

    def backward(self, gy):
        self.gw += self.x.T @ gy
        self.gb += gy.sum(axis=0, dtype=np.float64).astype(self.gb.dtype)
        return gy @ self.w.T

    def describe(self):
        return {"type": "dense", "n_in": self.n_in, "n_out": self.n_out}


class Conv2d(Layer):
    """3x3 convolution, stride 1, zero padding 1.

    The zero-padded input is flattened over (batch, row, col) with a guard
    band, so each of the 9 taps is a contiguous row offset and the layer is 9
    matrix products on views, with no im2col copy. Outputs are computed on
    the padded grid and the border is discarded.
    """

    def __init__(self, c_in: int, c_out: int):
        self.c_in, self.c_out = int(c_in), int(c_out)
        self.n_params = 9 * self.c_in * self.c_out + self.c_out

    def bind(self, params, grads):
        k = 9 * self.c_in * self.c_out
        self.w = params[:k].reshape(9 * self.c_in, self.c_out)
        self.b = params[k:]
        self.gw = grads[:k].reshape(9 * self.c_in, self.c_out)
        self.gb = grads[k:]

    def init(self, rng):
        self.w[...] = rng.standard_normal(self.w.shape) * np.sqrt(2.0 / (9 * self.c_in))
        self.b[...] = 0

    def output_shape(self, shape):
        if len(shape) != 3 or shape[2] != self.c_in:
            raise ValueError(f"conv layer expects (H, W, {self.c_in}), got {shape}")
        return (shape[0], shape[1], self.c_out)

    def _offsets(self, wp):
        guard = wp + 1
        return [guard + (dy - 1) * wp + (dx - 1) for dy in range(3) for dx in range(3)]

    def forward(self, x):
        b, h, w, c = x.shape
        hp, wp = h + 2, w + 2
        n = b * hp * wp
        xp = np.zeros((n + 2 * (wp + 1), c), dtype=x.dtype)
        xp[wp + 1:wp + 1 + n].reshape(b, hp, wp, c)[:, 1:-1, 1:-1] = x
        self.xp, self.in_shape = xp, x.shape
        wk = self.w.reshape(9, c, self.c_out)
        y = np.zeros((n, self.c_out), dtype=np.result_type(x.dtype, self.w.dtype))
        for k, off in enumerate(self._offsets(wp)):
            y += xp[off:off + n] @ wk[k]
        return y.reshape(b, hp, wp, self.c_out)[:, 1:-1, 1:-1] + self.b

    def backward(self, gy):
        b, h, w, c = self.in_shape
        hp, wp = h + 2, w + 2
        n = b * hp * wp
        gyp = np.zeros((b, hp, wp, self.c_out), dtype=gy.dtype)
        gyp[:, 1:-1, 1:-1] = gy
        gyp = gyp.reshape(n, self.c_out)
        wk = self.w.reshape(9, c, self.c_out)
        gwk = self.gw.reshape(9, c, self.c_out)
        gxp = np.zeros((n + 2 * (wp + 1), c), dtype=gy.dtype)
        for k, off in enumerate(self._offsets(wp)):
            gwk[k] += self.xp[off:off + n].T @ gyp
            gxp[off:off + n] += gyp @ wk[k].T
        self.gb += gy.reshape(-1, self.c_out).sum(axis=0, dtype=np.float64).astype(self.gb.dtype)
        return gxp[wp + 1:wp + 1 + n].reshape(b, hp, wp, c)[:, 1:-1, 1:-1]

    def describe(self):
        return {"type": "conv2d", "c_in": self.c_in, "c_out": self.c_out}


class Upsample2x(Layer):
    def output_shape(self, shape):
        return (2 * shape[0], 2 * shape[1], shape[2])

    def forward(self, x):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, gy):
        b, h, w, c = gy.shape
        return gy.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))

    def describe(self):
        return {"type": "upsample2x"}


class Reshape(Layer):
    def __init__(self, shape):
        self.shape = tuple(int(s) for s in shape)

    def output_shape(self, shape):
        if int(np.prod(shape)) != int(np.prod(self.shape)):
            raise ValueError(f"cannot reshape {shape} to {self.shape}")
        return self.shape

    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, gy):
        return gy.reshape(self.in_shape)

    def describe(self):
        return {"type": "reshape", "shape": list(self.shape)}


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.1):
        self.slope = float(slope)

    def forward(self, x):
        self.pos = x > 0
        return np.where(self.pos, x, self.slope * x)

    def backward(self, gy):
        return np.where(self.pos, gy, self.slope * gy)

    def describe(self):
        return {"type": "leaky_relu", "slope": self.slope}


class ReLU(Layer):
    def forward(self, x):
        self.pos = x > 0
        return np.where(self.pos, x, 0).astype(x.dtype)

    def backward(self, gy):
        return np.where(self.pos, gy, 0).astype(gy.dtype)

    def describe(self):
        return {"type": "relu"}


class Tanh(Layer):
    def forward(self, x):
        self.y = np.tanh(x)
        return self.y

    def backward(self, gy):
        return gy * (1 - self.y * self.y)

    def describe(self):
        return {"type": "tanh"}


_LAYERS = {
    "dense": lambda d: Dense(d["n_in"], d["n_out"]),
    "conv2d": lambda d: Conv2d(d["c_in"], d["c_out"]),
    "upsample2x": lambda d: Upsample2x(),
    "reshape": lambda d: Reshape(d["shape"]),
    "leaky_relu": lambda d: LeakyReLU(d.get("slope", 0.1)),
    "relu": lambda d: ReLU(),
    "tanh": lambda d: Tanh(),
}


class Network:
    def __init__(self, spec: list, input_shape, dtype=np.float32):
        self.spec = [dict(d) for d in spec]
        self.input_shape = tuple(int(s) for s in input_shape)
        self.dtype = np.dtype(dtype)
        try:
            self.layers = [_LAYERS[d["type"]](d) for d in self.spec]
        except KeyError as err:
            raise ValueError(f"unknown layer type {err}") from None
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape
        self.n_params = sum(layer.n_params for layer in self.layers)
        self.params = np.zeros(self.n_params, dtype=self.dtype)
        self.grads = np.zeros(self.n_params, dtype=self.dtype)
        offset = 0
        for layer in self.layers:
            sl = slice(offset, offset + layer.n_params)
            layer.bind(self.params[sl], self.grads[sl])
            offset += layer.n_params
        self._cached = False

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        self.params[...] = flat

    def zero_grad(self) -> None:
        self.grads[...] = 0

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} != network input {self.input_shape}")
        for layer in self.layers:
            x = layer.forward(x)
        self._cached = True
        return x

    def backward(self, gy: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients into ``self.grads``; return the input gradient."""
        if not self._cached:
            raise RuntimeError("backward called without a preceding forward pass")
        g = np.asarray(gy, dtype=self.dtype)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        self._cached = False
        return g

    def __call__(self, x):
        return self.forward(x)

    def describe(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [l.describe() for l in self.layers],
                "dtype": self.dtype.name}


def init_network(spec: list, input_shape, seed: int, dtype=np.float32) -> Network:
    """He-scaled Gaussian weights and zero biases from a seeded generator."""
    net = Network(spec, input_shape, dtype=dtype)
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        layer.init(rng)
    return net


def forward_pass(net: Network, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def backward_pass(net: Network, output_gradient: np.ndarray):
    """Return ``(parameter_gradient, input_gradient)`` for one output gradient."""
    net.zero_grad()
    gx = net.backward(output_gradient)
    return net.grads.copy(), gx


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """In-place bias-corrected Adam update; returns ``(params, state)``."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and state shapes differ")
    state.t += 1
    state.m *= beta1
    state.m += (1 - beta1) * grads
    state.v *= beta2
    state.v += (1 - beta2) * grads * grads
    m_hat = state.m / (1 - beta1 ** state.t)
    v_hat = state.v / (1 - beta2 ** state.t)
    params -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(params.dtype)
    return params, state


def mlp_spec(sizes: list, hidden: str = "relu", last: str | None = None) -> list:
    spec = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        spec.append({"type": "dense", "n_in": a, "n_out": b})
        act = hidden if i < len(sizes) - 2 else last
        if act:
            spec.append({"type": act})
    return spec
