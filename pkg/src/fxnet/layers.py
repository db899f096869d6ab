"""Layers with explicit forward and backward passes.

All image layers take batches shaped ``(N, C, H, W)``; dense layers take
``(N, D)``; the LSTM takes ``(N, T, D)``.  A layer owns its parameters and
the cache left behind by the last forward pass, so one instance must not be
shared between concurrent passes.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, RngStream, get_dtype, zeros

# conv work is split into batch chunks of this size to cap im2col memory
_CONV_CHUNK = 16


class BackwardRule(enum.Enum):
    TRUE_GRADIENT = "backprop"
    DECONVNET = "deconvnet"
    GUIDED = "guided"


class CacheError(RuntimeError):
    pass


class ShapePlanError(ValueError):
    pass


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Layer:
    kind = "layer"
    param_names: tuple[str, ...] = ()

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return input_shape

    def init_params(self, input_shape: tuple[int, ...], rng: RngStream) -> None:
        pass

    def forward(self, x: np.ndarray, *, train: bool = False, rng: RngStream | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, rule: BackwardRule = BackwardRule.TRUE_GRADIENT) -> np.ndarray:
        raise NotImplementedError

    def config(self) -> dict:
        return {"kind": self.kind, "name": self.name}

    def _need(self, attr: str):
        value = getattr(self, attr, None)
        if value is None:
            raise CacheError(f"{self.name}: backward called without a forward cache")
        return value

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


def _he_normal(rng: RngStream, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)).astype(get_dtype())


def correlate2d(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    """Batched multi-channel cross-correlation, stride 1.

    ``x``: (N, C, H, W), ``w``: (O, C, k, k) -> (N, O, H + 2*pad - k + 1, ...).
    """
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho, wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    out = np.empty((x.shape[0], w.shape[0], ho, wo), dtype=np.result_type(x, w))
    for s in range(0, x.shape[0], _CONV_CHUNK):
        cols = sliding_window_view(xp[s:s + _CONV_CHUNK], (k, k), axis=(2, 3))
        # cols: (n, C, ho, wo, k, k)
        out[s:s + _CONV_CHUNK] = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return out


class Conv2D(Layer):
    kind = "conv2d"
    param_names = ("weight", "bias")

    def __init__(self, name: str, out_channels: int, kernel: int = 5, padding: str | int = "same"):
        super().__init__(name)
        if kernel % 2 == 0 and padding == "same":
            raise ValueError("same padding needs an odd kernel")
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.padding = padding
        self.pad = (kernel - 1) // 2 if padding == "same" else int(padding)
        self.in_channels: int | None = None
        self._x = None

    def output_shape(self, input_shape):
        c, h, w = input_shape
        ho, wo = h + 2 * self.pad - self.kernel + 1, w + 2 * self.pad - self.kernel + 1
        if ho < 1 or wo < 1:
            raise ShapePlanError(f"{self.name}: input {input_shape} too small for {self.kernel}x{self.kernel} kernel")
        return (self.out_channels, ho, wo)

    def init_params(self, input_shape, rng):
        self.in_channels = input_shape[0]
        fan_in = self.in_channels * self.kernel * self.kernel
        self.params["weight"] = _he_normal(rng, (self.out_channels, self.in_channels, self.kernel, self.kernel), fan_in)
        self.params["bias"] = zeros((self.out_channels,))

    def forward(self, x, *, train=False, rng=None):
        w = self.params["weight"]
        if x.ndim != 4 or x.shape[1] != w.shape[1]:
            raise DimensionError(f"{self.name}: expected (N, {w.shape[1]}, H, W) input, got {x.shape}")
        self._x = x
        return correlate2d(x, w, self.pad) + self.params["bias"][None, :, None, None]

    def backward(self, grad, rule=BackwardRule.TRUE_GRADIENT, input_grad: bool = True):
        x = self._need("_x")
        w = self.params["weight"]
        k, p = self.kernel, self.pad
        self.grads["bias"] = grad.sum(axis=(0, 2, 3))
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        o, c = w.shape[:2]
        gw = np.zeros((o, c * k * k), dtype=w.dtype)
        for s in range(0, x.shape[0], _CONV_CHUNK):
            g = grad[s:s + _CONV_CHUNK]
            cols = sliding_window_view(xp[s:s + _CONV_CHUNK], (k, k), axis=(2, 3))
            cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(-1, c * k * k)
            gw += g.transpose(1, 0, 2, 3).reshape(o, -1) @ cols
        self.grads["weight"] = gw.reshape(w.shape)
        if not input_grad:
            return None
        # correlating with the flipped, channel-transposed kernel at padding
        # k-1-p yields the gradient w.r.t. the unpadded input directly
        flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        if k - 1 - p >= 0:
            return correlate2d(grad, flipped, k - 1 - p)
        return correlate2d(grad, flipped, k - 1)[:, :, p:-p, p:-p]

    def config(self):
        return {**super().config(), "out_channels": self.out_channels, "kernel": self.kernel, "padding": self.padding}


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name):
        super().__init__(name)
        self._x = None

    def forward(self, x, *, train=False, rng=None):
        self._x = x
        return np.maximum(x, 0)

    def backward(self, grad, rule=BackwardRule.TRUE_GRADIENT):
        return relu_backward(grad, self._need("_x"), rule)


def relu_backward(grad: np.ndarray, x: np.ndarray, rule: BackwardRule) -> np.ndarray:
    """ReLU backward under the three visualization rules.

    TRUE_GRADIENT gates on the forward input, DECONVNET on the incoming
    gradient, GUIDED on both.
    """
    zero = np.zeros((), dtype=grad.dtype)
    if rule is BackwardRule.TRUE_GRADIENT:
        return np.where(x > 0, grad, zero)
    if rule is BackwardRule.DECONVNET:
        return np.where(grad > 0, grad, zero)
    if rule is BackwardRule.GUIDED:
        return np.where((x > 0) & (grad > 0), grad, zero)
    raise ValueError(f"unknown backward rule {rule!r}")


class MaxPool2D(Layer):
    """2x2 max pooling, stride 2.  Ties go to the lowest index in the window."""

    kind = "maxpool2d"

    def __init__(self, name, size: int = 2):
        super().__init__(name)
        if size != 2:
            raise ValueError("only 2x2 pooling is supported")
        self.size = size
        self._arg = None
        self._shape = None

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if h % 2 or w % 2:
            raise ShapePlanError(f"{self.name}: 2x2 pooling needs even extents, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x, *, train=False, rng=None):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapePlanError(f"{self.name}: 2x2 pooling needs even extents, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        arg = win.argmax(axis=-1)  # first occurrence == lowest linear index
        self._arg = arg
        self._shape = x.shape
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(self, grad, rule=BackwardRule.TRUE_GRADIENT):
        arg = self._need("_arg")
        n, c, h, w = self._shape
        win = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(win, arg[..., None], grad[..., None], axis=-1)
        return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, name):
        super().__init__(name)
        self._shape = None

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, *, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, rule=BackwardRule.TRUE_GRADIENT):
        return grad.reshape(self._need("_shape"))


class Dense(Layer):
    kind = "dense"
    param_names = ("weight", "bias")

    def __init__(self, name, units: int):
        super().__init__(name)
        self.units = int(units)
        self._x = None

    def output_shape(self, input_shape):
        if len(input_shape) != 1:
            raise ShapePlanError(f"{self.name}: dense layer needs a flat input, got {input_shape}")
        return (self.units,)

    def init_params(self, input_shape, rng):
        fan_in = input_shape[0]
        self.params["weight"] = _he_normal(rng, (fan_in, self.units), fan_in)
        self.params["bias"] = zeros((self.units,))

    def forward(self, x, *, train=False, rng=None):
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise DimensionError(f"{self.name}: expected (N, {w.shape[0]}) input, got {x.shape}")
        self._x = x
        return x @ w + self.params["bias"]

    def backward(self, grad, rule=BackwardRule.TRUE_GRADIENT):
        x = self._need("_x")
        self.grads["weight"] = x.T @ grad
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"].T

    def config(self):
        return {**super().config(), "units": self.units}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Softmax(Layer):
    kind = "softmax"

    def __init__(self, name):
        super().__init__(name)
        self._p = None

    def forward(self, x, *, train=False, rng=None):
        self._p = softmax(x)
        return self._p

    def backward(self, grad, rule=BackwardRule.TRUE_GRADIENT):
        p = self._need("_p")
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-p) so inference is the identity."""

    kind = "dropout"

    def __init__(self, name, p: float):
        super().__init__(name)
        if not 0.0 <= p < 1.0:
            raise ValueError(f"{name}: dropout probability must be in [0, 1), got {p}")
        self.p = float(p)
        self.mask = None

    def forward(self, x, *, train=False, rng=None):
        if not train or self.p == 0.0:
            self.mask = None
            return x
        if rng is None:
            raise ValueError(f"{self.name}: training-mode dropout needs an rng")
        keep = rng.random(x.shape) >= self.p
        self.mask = keep.astype(x.dtype) / x.dtype.type(1.0 - self.p)
        return x * self.mask

    def backward(self, grad, rule=BackwardRule.TRUE_GRADIENT):
        return grad if self.mask is None else grad * self.mask

    def config(self):
        return {**super().config(), "p": self.p}


def dropout_forward(x: np.ndarray, p: float, mode: str, rng: RngStream | None = None) -> np.ndarray:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return Dropout("dropout", p).forward(x, train=mode == "train", rng=rng)


class LSTM(Layer):
    """Single LSTM layer over ``(N, T, D)`` batches, returning all hidden states.

    Gate order in the packed weights is input, forget, output, candidate.
    Recurrent dropout draws one mask per sequence for the hidden-to-hidden
    path and reuses it at every step.
    """

    kind = "lstm"
    param_names = ("weight_input", "weight_hidden", "bias")

    def __init__(self, name, hidden_units: int, recurrent_dropout: float = 0.0):
        super().__init__(name)
        if not 0.0 <= recurrent_dropout < 1.0:
            raise ValueError("recurrent dropout must be in [0, 1)")
        self.hidden = int(hidden_units)
        self.recurrent_dropout = float(recurrent_dropout)
        self.rec_mask = None
        self._trace = None

    def output_shape(self, input_shape):
        t, _ = input_shape
        return (t, self.hidden)

    def init_params(self, input_shape, rng):
        d = input_shape[-1]
        h = self.hidden
        self.params["weight_input"] = (rng.normal(0.0, np.sqrt(1.0 / d), size=(d, 4 * h))).astype(get_dtype())
        self.params["weight_hidden"] = (rng.normal(0.0, np.sqrt(1.0 / h), size=(h, 4 * h))).astype(get_dtype())
        bias = zeros((4 * h,))
        bias[h:2 * h] = 1.0
        self.params["bias"] = bias

    def forward(self, x, *, train=False, rng=None):
        n, t_len, d = x.shape
        if t_len == 0:
            raise ValueError(f"{self.name}: empty sequence")
        h = self.hidden
        wx, wh, b = self.params["weight_input"], self.params["weight_hidden"], self.params["bias"]
        if d != wx.shape[0]:
            raise DimensionError(f"{self.name}: expected feature size {wx.shape[0]}, got {d}")
        if train and self.recurrent_dropout > 0.0:
            if rng is None:
                raise ValueError(f"{self.name}: recurrent dropout needs an rng")
            keep = rng.random((n, h)) >= self.recurrent_dropout
            self.rec_mask = keep.astype(x.dtype) / x.dtype.type(1.0 - self.recurrent_dropout)
        else:
            self.rec_mask = None
        mask = self.rec_mask
        hs = np.zeros((n, t_len + 1, h), dtype=x.dtype)
        cs = np.zeros((n, t_len + 1, h), dtype=x.dtype)
        gates = np.zeros((n, t_len, 4 * h), dtype=x.dtype)
        xw = x @ wx + b
        for t in range(t_len):
            hprev = hs[:, t] if mask is None else hs[:, t] * mask
            z = xw[:, t] + hprev @ wh
            g = np.empty_like(z)
            g[:, :3 * h] = sigmoid(z[:, :3 * h])
            g[:, 3 * h:] = np.tanh(z[:, 3 * h:])
            gates[:, t] = g
            cs[:, t + 1] = g[:, h:2 * h] * cs[:, t] + g[:, :h] * g[:, 3 * h:]
            hs[:, t + 1] = g[:, 2 * h:3 * h] * np.tanh(cs[:, t + 1])
        self._trace = (x, hs, cs, gates)
        return hs[:, 1:].copy()

    def backward(self, grad, rule=BackwardRule.TRUE_GRADIENT):
        x, hs, cs, gates = self._need("_trace")
        mask = self.rec_mask
        n, t_len, _ = x.shape
        h = self.hidden
        wx, wh = self.params["weight_input"], self.params["weight_hidden"]
        dz_all = np.zeros_like(gates)
        dwh = np.zeros_like(wh)
        dh_next = np.zeros((n, h), dtype=grad.dtype)
        dc_next = np.zeros((n, h), dtype=grad.dtype)
        for t in reversed(range(t_len)):
            g = gates[:, t]
            i, f, o, cand = g[:, :h], g[:, h:2 * h], g[:, 2 * h:3 * h], g[:, 3 * h:]
            tc = np.tanh(cs[:, t + 1])
            dh = grad[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = np.empty_like(g)
            dz[:, :h] = dc * cand * i * (1.0 - i)
            dz[:, h:2 * h] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, 2 * h:3 * h] = dh * tc * o * (1.0 - o)
            dz[:, 3 * h:] = dc * i * (1.0 - cand * cand)
            dz_all[:, t] = dz
            hprev = hs[:, t] if mask is None else hs[:, t] * mask
            dwh += hprev.T @ dz
            dhprev = dz @ wh.T
            dh_next = dhprev if mask is None else dhprev * mask
            dc_next = dc * f
        flat = dz_all.reshape(n * t_len, 4 * h)
        self.grads["weight_input"] = x.reshape(n * t_len, -1).T @ flat
        self.grads["weight_hidden"] = dwh
        self.grads["bias"] = flat.sum(axis=0)
        return dz_all @ wx.T

    def config(self):
        return {**super().config(), "hidden_units": self.hidden, "recurrent_dropout": self.recurrent_dropout}


def shape_plan(layers: Sequence[Layer], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Per-layer output shapes (batch axis excluded)."""
    shapes = []
    shape = tuple(input_shape)
    for layer in layers:
        shape = layer.output_shape(shape)
        shapes.append(shape)
    return shapes
