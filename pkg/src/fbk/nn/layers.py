"""Layers with hand-written backward passes.

Every layer keeps its trainable arrays in ``params`` and the matching
gradients in ``grads`` after :meth:`Layer.backward`. Parameter gradients are
summed over the batch; the loss head supplies the 1/batch factor.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, DimensionError
from ..fb_conv import (
    FbConvLayer,
    fb_conv_backward,
    fb_conv_forward,
    from_patch_rows,
    patch_grad_to_image,
    rows_from_output_grad,
    to_patch_rows,
)
from ..fb_dense import (
    FbLayerParams,
    fb_backward,
    fb_forward,
    inference_mask,
    init_linear,
    init_params,
    linear_backward,
    linear_forward,
    sample_mask,
)
from ..tensor import ConvGeometry


class Layer:
    is_fb = False
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.no_decay: set[str] = set()
        self.debug = False

    def init(self, rng: np.random.Generator, dtype) -> None:
        pass

    def resample(self, rng: np.random.Generator) -> None:
        pass

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def describe(self) -> dict:
        return {"kind": self.kind}

    def param_count(self) -> int:
        return sum(int(a.size) for a in self.params.values())


class Linear(Layer):
    kind = "linear"

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out

    def init(self, rng, dtype):
        W, b = init_linear(self.n_out, self.n_in, rng, dtype)
        self.params = {"W": W, "b": b}

    def forward(self, x, train):
        self._x = x
        return linear_forward(x, self.params["W"], self.params["b"])

    def backward(self, dy):
        d_b, d_W, d_x = linear_backward(dy, self._x, self.params["W"])
        self.grads = {"W": d_W, "b": d_b}
        return d_x

    def out_shape(self, in_shape):
        if in_shape != (self.n_in,):
            raise DimensionError(f"linear layer expects ({self.n_in},), got {in_shape}")
        return (self.n_out,)

    def describe(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out}


class Conv2d(Layer):
    """Plain convolution through the same patch-row path the FB conv uses."""

    kind = "conv"

    def __init__(self, geometry: ConvGeometry):
        super().__init__()
        self.geometry = geometry

    def init(self, rng, dtype):
        g = self.geometry
        W, b = init_linear(g.out_channels, g.patch_size, rng, dtype)
        self.params = {"W": W, "b": b}

    def forward(self, x, train):
        rows, hw = to_patch_rows(x, self.geometry)
        self._rows, self._in_shape = rows, x.shape
        return from_patch_rows(linear_forward(rows, self.params["W"], self.params["b"]), x.shape[0], hw)

    def backward(self, dy):
        d_b, d_W, d_rows = linear_backward(rows_from_output_grad(dy), self._rows, self.params["W"])
        self.grads = {"W": d_W, "b": d_b}
        return patch_grad_to_image(d_rows, self.geometry, self._in_shape)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.geometry.in_channels:
            raise DimensionError(f"conv expects {self.geometry.in_channels} channels, got {c}")
        return (self.geometry.out_channels, *self.geometry.output_hw(h, w))

    def describe(self):
        return {"kind": self.kind, "geometry": self.geometry.to_dict()}


class _FbMixin:
    """Mask handling shared by the dense and convolutional FB layers."""

    is_fb = True

    def _setup(self, k: int, p: float, inverted: bool, factor_std):
        self.k, self.p, self.inverted, self.factor_std = k, p, inverted, factor_std
        self.mask = None

    def resample(self, rng):
        self.mask = sample_mask(self.k, self.p, rng, inverted=self.inverted)

    def _mask(self, train: bool):
        if not train:
            return inference_mask(self.k, self.p, inverted=self.inverted)
        if self.mask is None:
            raise ContractError("training-mode forward before any mask was sampled")
        return self.mask

    def _fb_params(self) -> FbLayerParams:
        return FbLayerParams(self.params["b"], self.params["W"], self.params["F"])

    def _check_input_range(self, x: np.ndarray) -> None:
        if self.debug and self.k and np.max(np.abs(x), initial=0.0) > 1.0:
            raise AssertionError("FB layer input left [-1, 1]; is a Tanh missing in front of it?")

    def _check_projection_bound(self, proj: np.ndarray) -> None:
        """Debug guard: with inputs in [-1, 1] each (f_t . x)^2 is at most ||f_t||_1^2."""
        if not self.debug or self.k == 0:
            return
        bound = np.abs(self.params["F"]).sum(axis=2) ** 2       # (c, k)
        if np.any(proj ** 2 > bound * (1 + 1e-9)):
            raise AssertionError("squared factor projection exceeds its l1 bound")


class FbDense(_FbMixin, Layer):
    kind = "fb-dense"

    def __init__(self, n_in: int, n_out: int, k: int, p: float = 1.0, inverted: bool = False,
                 factor_std: float | None = None):
        Layer.__init__(self)
        self.n_in, self.n_out = n_in, n_out
        self._setup(k, p, inverted, factor_std)

    def init(self, rng, dtype):
        params = init_params(self.n_out, self.n_in, self.k, rng, self.factor_std, dtype)
        self.params = {"W": params.W, "b": params.b, "F": params.F}

    def forward(self, x, train):
        self._check_input_range(x)
        self._used_mask = self._mask(train)
        y, self._cache = fb_forward(x, self._fb_params(), self._used_mask)
        self._check_projection_bound(self._cache.proj)
        return y

    def backward(self, dy):
        g = fb_backward(dy, self._cache, self._fb_params(), self._used_mask)
        self.grads = {"W": g.d_W, "b": g.d_b, "F": g.d_F}
        return g.d_x

    out_shape = Linear.out_shape

    def describe(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out, "k": self.k, "p": self.p}


class FbConv(_FbMixin, Layer):
    kind = "fb-conv"

    def __init__(self, geometry: ConvGeometry, k: int, p: float = 1.0, inverted: bool = False,
                 factor_std: float | None = None):
        Layer.__init__(self)
        self.geometry = geometry
        self._setup(k, p, inverted, factor_std)

    def init(self, rng, dtype):
        g = self.geometry
        params = init_params(g.out_channels, g.patch_size, self.k, rng, self.factor_std, dtype)
        self.params = {"W": params.W, "b": params.b, "F": params.F}

    def _layer(self) -> FbConvLayer:
        return FbConvLayer(self.geometry, self._fb_params(), self.p)

    def forward(self, x, train):
        self._check_input_range(x)
        self._used_mask = self._mask(train)
        y, self._cache = fb_conv_forward(x, self._layer(), self._used_mask)
        self._check_projection_bound(self._cache.fb.proj)
        return y

    def backward(self, dy):
        g, d_x = fb_conv_backward(dy, self._cache, self._layer(), self._used_mask)
        self.grads = {"W": g.d_W, "b": g.d_b, "F": g.d_F}
        return d_x

    out_shape = Conv2d.out_shape

    def describe(self):
        return {"kind": self.kind, "geometry": self.geometry.to_dict(), "k": self.k, "p": self.p}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train):
        self._mask_pos = x > 0
        return np.where(self._mask_pos, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, dy):
        return dy * self._mask_pos


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, train):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dy):
        return dy * (1.0 - self._y ** 2)


class BatchNorm(Layer):
    """Per-channel batch normalization for (N, C) or (N, C, H, W) inputs."""

    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.no_decay = {"gamma", "beta"}

    def init(self, rng, dtype):
        c = self.channels
        self.params = {"gamma": np.ones(c, dtype), "beta": np.zeros(c, dtype)}
        self.buffers = {"running_mean": np.zeros(c, dtype), "running_var": np.ones(c, dtype)}

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bc(self, v, x):
        return v if x.ndim == 2 else v[None, :, None, None]

    def forward(self, x, train):
        axes = self._axes(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bc(mean, x)) * self._bc(inv_std, x)
        self._xhat, self._inv_std, self._train = xhat, inv_std, train
        return self._bc(self.params["gamma"], x) * xhat + self._bc(self.params["beta"], x)

    def backward(self, dy):
        axes = self._axes(dy)
        xhat = self._xhat
        self.grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        g = self._bc(self.params["gamma"] * self._inv_std, dy)
        if not self._train:
            return dy * g
        mean_dy = self._bc(dy.mean(axis=axes), dy)
        mean_dy_xhat = self._bc((dy * xhat).mean(axis=axes), dy)
        return g * (dy - mean_dy - xhat * mean_dy_xhat)

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise DimensionError(f"batchnorm expects {self.channels} channels, got {in_shape}")
        return in_shape

    def describe(self):
        return {"kind": self.kind, "channels": self.channels}


class _Pool2d(Layer):
    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def _windows(self, x):
        n, c, h, w = x.shape
        s = self.size
        ho, wo = h // s, w // s
        x = x[:, :, :ho * s, :wo * s]
        win = x.reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, s * s)
        return win, (n, c, h, w, ho, wo)

    def _unwindow(self, dwin, dims):
        n, c, h, w, ho, wo = dims
        s = self.size
        out = np.zeros((n, c, h, w), dtype=dwin.dtype)
        out[:, :, :ho * s, :wo * s] = (
            dwin.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * s, wo * s)
        )
        return out

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise DimensionError(f"pool size {self.size} exceeds input {h}x{w}")
        return (c, h // self.size, w // self.size)

    def describe(self):
        return {"kind": self.kind, "size": self.size}


class MaxPool2d(_Pool2d):
    kind = "maxpool"

    def forward(self, x, train):
        win, self._dims = self._windows(x)
        self._arg = win.argmax(axis=-1)[..., None]
        return np.take_along_axis(win, self._arg, axis=-1)[..., 0]

    def backward(self, dy):
        n, c, h, w, ho, wo = self._dims
        dwin = np.zeros((n, c, ho, wo, self.size * self.size), dtype=dy.dtype)
        np.put_along_axis(dwin, self._arg, dy[..., None], axis=-1)
        return self._unwindow(dwin, self._dims)


class AvgPool2d(_Pool2d):
    kind = "avgpool"

    def forward(self, x, train):
        win, self._dims = self._windows(x)
        return win.mean(axis=-1)

    def backward(self, dy):
        s2 = self.size * self.size
        dwin = np.repeat(dy[..., None] / s2, s2, axis=-1)
        return self._unwindow(dwin, self._dims)


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x, train):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        n, c, h, w = self._shape
        return np.broadcast_to(dy[:, :, None, None] / (h * w), self._shape).copy()

    def out_shape(self, in_shape):
        return (in_shape[0],)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Dropout(Layer):
    """Standard (inverted) unit dropout with drop ``rate``.

    ``resample`` fixes a seed, so repeated training-mode forwards between two
    resamples reuse one mask (needed for finite-difference checks).
    """

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate
        self._seed = None

    def resample(self, rng):
        self._seed = int(rng.integers(2**63))

    def forward(self, x, train):
        if not train or self.rate == 0.0:
            self._keep = None
            return x
        if self._seed is None:
            raise ContractError("dropout forward in training mode before any mask was sampled")
        draw = np.random.default_rng(self._seed).random(x.shape)
        self._keep = (draw >= self.rate) / (1.0 - self.rate)
        return x * self._keep

    def backward(self, dy):
        return dy if self._keep is None else dy * self._keep

    def describe(self):
        return {"kind": self.kind, "rate": self.rate}
