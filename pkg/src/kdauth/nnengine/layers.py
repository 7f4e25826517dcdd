"""Feed-forward layers with explicit forward/backward passes.

Every layer keeps what its backward pass needs from the most recent
training-mode forward call.  Arrays are batch-first; images are NCHW.
"""
from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Input shape does not fit a layer."""


class StateError(RuntimeError):
    """Backward called without a matching training-mode forward."""


class Layer:
    kind = "Layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.name = self.kind
        self._cache = None

    def spec(self) -> dict:
        return {"kind": self.kind}

    def init_params(self, rng: np.random.Generator, dtype) -> None:
        pass

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward without a training-mode forward")
        cache, self._cache = self._cache, None
        return cache

    def _check_rank(self, shape, rank, what):
        if len(shape) != rank:
            raise DimensionError(f"{self.name} expects {what}, got per-sample shape {tuple(shape)}")


# He-uniform bound sqrt(6 / fan_in) keeps activation scale through ReLU stacks
HE_GAIN = float(np.sqrt(6.0))


def _uniform(rng, fan_in, shape, dtype, gain=1.0):
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _pair(v):
    if isinstance(v, int):
        return (v, v)
    return tuple(int(u) for u in v)


class Conv2d(Layer):
    """2-D cross-correlation.

    ``padding`` is "same" (odd kernels only), "valid", or explicit
    ``[top, bottom, left, right]``.
    """

    kind = "Conv2d"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding="same"):
        super().__init__()
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        kh, kw = self.kernel
        if padding == "same":
            if kh % 2 == 0 or kw % 2 == 0:
                raise ValueError("'same' padding needs odd kernel sides")
            self.pad = (kh // 2, kh // 2, kw // 2, kw // 2)
        elif padding == "valid":
            self.pad = (0, 0, 0, 0)
        else:
            self.pad = tuple(int(p) for p in padding)
        self.padding = padding if isinstance(padding, str) else list(self.pad)
        # the network clears this on its input layer to skip an unused gradient
        self.input_grad = True

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel": list(self.kernel), "stride": list(self.stride), "padding": self.padding}

    def init_params(self, rng, dtype):
        kh, kw = self.kernel
        fan_in = self.in_channels * kh * kw
        self.params["weight"] = _uniform(rng, fan_in, (self.out_channels, self.in_channels, kh, kw), dtype, HE_GAIN)
        self.params["bias"] = np.zeros(self.out_channels, dtype=dtype)

    def output_shape(self, shape):
        self._check_rank(shape, 3, "(C, H, W) input")
        c, h, w = shape
        if c != self.in_channels:
            raise DimensionError(f"{self.name} expects {self.in_channels} channels, got {c}")
        t, b, l, r = self.pad
        kh, kw = self.kernel
        hp, wp = h + t + b, w + l + r
        if kh > hp or kw > wp:
            raise DimensionError(f"{self.name}: kernel {self.kernel} larger than padded input {(hp, wp)}")
        sh, sw = self.stride
        return (self.out_channels, (hp - kh) // sh + 1, (wp - kw) // sw + 1)

    def forward(self, x, training=False, rng=None):
        n = x.shape[0]
        _, ho, wo = self.output_shape(x.shape[1:])
        t, b, l, r = self.pad
        # channels-last keeps each pixel's channels contiguous
        xh = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        if any(self.pad):
            xh = np.pad(xh, ((0, 0), (t, b), (l, r), (0, 0)))
        if self.stride == (1, 1) and self.in_channels >= 16:
            y, cache = self._forward_shifted(xh, ho, wo)
        else:
            y, cache = self._forward_im2col(xh, ho, wo)
        y += self.params["bias"]
        if training:
            self._cache = cache
        return y.transpose(0, 3, 1, 2)

    def backward(self, dy):
        cache = self._take_cache()
        dyh = dy.transpose(0, 2, 3, 1)
        self.grads["bias"] = dyh.sum(axis=(0, 1, 2))
        if cache[0] == "shifted":
            dx = self._backward_shifted(dyh, cache)
        else:
            dx = self._backward_im2col(dyh, cache)
        if dx is None:
            return None
        t, b, l, r = self.pad
        hp, wp = dx.shape[1:3]
        return dx[:, t:hp - b, l:wp - r, :].transpose(0, 3, 1, 2)

    # Stride 1: flatten the padded batch to (pixels, C).  Kernel tap (i, j)
    # then reads the rows shifted by i*wp + j, a contiguous slice, so each
    # tap is one plain matmul.  Rows past the valid output are discarded.
    def _forward_shifted(self, xh, ho, wo):
        n, hp, wp, c = xh.shape
        kh, kw = self.kernel
        rows = n * hp * wp
        flat = np.zeros((rows + (kh - 1) * wp + kw - 1, c), dtype=xh.dtype)
        flat[:rows] = xh.reshape(rows, c)
        taps = np.ascontiguousarray(self.params["weight"].transpose(2, 3, 1, 0))  # (kh, kw, C, O)
        y = np.zeros((rows, self.out_channels), dtype=xh.dtype)
        tmp = np.empty_like(y)
        for i in range(kh):
            for j in range(kw):
                s = i * wp + j
                np.matmul(flat[s:s + rows], taps[i, j], out=tmp)
                y += tmp
        y = y.reshape(n, hp, wp, self.out_channels)[:, :ho, :wo]
        return y, ("shifted", flat, xh.shape)

    def _backward_shifted(self, dyh, cache):
        _, flat, xshape = cache
        n, hp, wp, c = xshape
        kh, kw = self.kernel
        ho, wo = dyh.shape[1:3]
        rows = n * hp * wp
        d_ext = np.zeros((n, hp, wp, self.out_channels), dtype=dyh.dtype)
        d_ext[:, :ho, :wo] = dyh
        d_ext = d_ext.reshape(rows, self.out_channels)
        taps = np.ascontiguousarray(self.params["weight"].transpose(2, 3, 0, 1))  # (kh, kw, O, C)
        gw = np.empty((kh, kw, c, self.out_channels), dtype=dyh.dtype)
        for i in range(kh):
            for j in range(kw):
                s = i * wp + j
                gw[i, j] = flat[s:s + rows].T @ d_ext
        self.grads["weight"] = gw.transpose(3, 2, 0, 1).copy()
        if not self.input_grad:
            return None
        dflat = np.zeros_like(flat)
        for i in range(kh):
            for j in range(kw):
                s = i * wp + j
                dflat[s:s + rows] += d_ext @ taps[i, j]
        return dflat[:rows].reshape(xshape)

    def _forward_im2col(self, xh, ho, wo):
        n = xh.shape[0]
        kh, kw = self.kernel
        sh, sw = self.stride
        cols = np.empty((n, ho, wo, kh, kw, self.in_channels), dtype=xh.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xh[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :]
        cols = cols.reshape(n * ho * wo, -1)
        y = cols @ self._wmat().T
        return y.reshape(n, ho, wo, self.out_channels), ("im2col", cols, xh.shape)

    def _wmat(self):
        # (O, kh, kw, C) flattened to match the column layout
        return self.params["weight"].transpose(0, 2, 3, 1).reshape(self.out_channels, -1)

    def _backward_im2col(self, dyh, cache):
        _, cols, xshape = cache
        n, hp, wp, c = xshape
        kh, kw = self.kernel
        sh, sw = self.stride
        ho, wo = dyh.shape[1:3]
        d2 = dyh.reshape(-1, self.out_channels)
        gw = d2.T @ cols
        self.grads["weight"] = gw.reshape(self.out_channels, kh, kw, c).transpose(0, 3, 1, 2).copy()
        if not self.input_grad:
            return None
        dcols = (d2 @ self._wmat()).reshape(n, ho, wo, kh, kw, c)
        dx = np.zeros(xshape, dtype=dyh.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += dcols[:, :, :, i, j, :]
        return dx


class MaxPool2d(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""

    kind = "MaxPool2d"

    def __init__(self, size=2):
        super().__init__()
        self.size = int(size)

    def spec(self):
        return {"kind": self.kind, "size": self.size}

    def output_shape(self, shape):
        self._check_rank(shape, 3, "(C, H, W) input")
        c, h, w = shape
        if h < self.size or w < self.size:
            raise DimensionError(f"{self.name}: input {h}x{w} smaller than pool window")
        return (c, h // self.size, w // self.size)

    def forward(self, x, training=False, rng=None):
        n, c, h, w = x.shape
        k = self.size
        ho, wo = h // k, w // k
        blocks = x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, ho, wo, k * k)
        idx = blocks.argmax(axis=-1)
        if training:
            self._cache = (idx, x.shape)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        idx, xshape = self._take_cache()
        n, c, h, w = xshape
        k = self.size
        ho, wo = h // k, w // k
        blocks = np.zeros((n, c, ho, wo, k * k), dtype=dy.dtype)
        np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
        blocks = blocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        dx = np.zeros(xshape, dtype=dy.dtype)
        dx[:, :, :ho * k, :wo * k] = blocks
        return dx


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, training=False, rng=None):
        if training:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._take_cache())


class ToSequence(Layer):
    """(C, T, W) feature maps to a (T, C*W) sequence, time along the height axis."""

    kind = "ToSequence"

    def output_shape(self, shape):
        self._check_rank(shape, 3, "(C, T, W) input")
        c, t, w = shape
        return (t, c * w)

    def forward(self, x, training=False, rng=None):
        n, c, t, w = x.shape
        if training:
            self._cache = x.shape
        return x.transpose(0, 2, 1, 3).reshape(n, t, c * w)

    def backward(self, dy):
        n, c, t, w = self._take_cache()
        return dy.reshape(n, t, c, w).transpose(0, 2, 1, 3)


class Unsqueeze(Layer):
    """Adds a leading channel axis: (L, W) -> (1, L, W)."""

    kind = "Unsqueeze"

    def output_shape(self, shape):
        return (1,) + tuple(shape)

    def forward(self, x, training=False, rng=None):
        if training:
            self._cache = True
        return x[:, None]

    def backward(self, dy):
        self._take_cache()
        return dy[:, 0]


class Dense(Layer):
    """y = x W^T + b with W of shape (units, in_features)."""

    kind = "Dense"

    def __init__(self, in_features, units):
        super().__init__()
        self.in_features = int(in_features)
        self.units = int(units)

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features, "units": self.units}

    def init_params(self, rng, dtype):
        self.params["weight"] = _uniform(rng, self.in_features, (self.units, self.in_features), dtype, HE_GAIN)
        self.params["bias"] = np.zeros(self.units, dtype=dtype)

    def output_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise DimensionError(f"{self.name} expects ({self.in_features},) input, got {tuple(shape)}")
        return (self.units,)

    def forward(self, x, training=False, rng=None):
        if training:
            self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dy):
        x = self._take_cache()
        self.grads["weight"] = dy.T @ x
        self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"]


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) while training."""

    kind = "Dropout"

    def __init__(self, rate=0.5):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = float(rate)

    def spec(self):
        return {"kind": self.kind, "rate": self.rate}

    def forward(self, x, training=False, rng=None):
        if not training:
            return x
        if self.rate == 0.0:
            self._cache = 1.0
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._take_cache()


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, training=False, rng=None):
        mask = x > 0
        if training:
            self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._take_cache()


class Sigmoid(Layer):
    kind = "Sigmoid"

    def forward(self, x, training=False, rng=None):
        y = sigmoid(x)
        if training:
            self._cache = y
        return y

    def backward(self, dy):
        y = self._take_cache()
        return dy * y * (1.0 - y)


def sigmoid(x):
    # the tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))
