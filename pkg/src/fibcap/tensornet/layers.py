"""Layers with hand-written forward and backward passes.

Tensors are plain numpy arrays laid out as (batch, channels, height, width).
Every layer caches what its backward pass needs during ``forward`` and
consumes that cache in ``backward``; a layer therefore supports one
outstanding forward at a time.
"""

import numpy as np


class NumericalError(FloatingPointError):
    """Raised when a tensor picks up NaN or Inf."""


def check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values after {where}")
    return x


class Layer:
    """Base class. ``params`` and ``grads`` share keys."""

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


def _im2col3(xp, stride, ho, wo):
    # xp is already zero-padded by 1 on both spatial axes
    b, c = xp.shape[:2]
    cols = np.empty((b, c, 9, ho, wo), dtype=xp.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, 3 * dy + dx] = xp[:, :, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride]
    return cols.reshape(b, c * 9, ho * wo)


class Conv2d(Layer):
    """3x3 (padding 1) or 1x1 (padding 0) cross-correlation.

    Output spatial size at stride 2 is ``ceil(n / 2)``.
    """

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, rng=None, dtype=np.float32):
        super().__init__()
        if kernel not in (1, 3):
            raise ValueError("kernel must be 1 or 3")
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if kernel == 1 and stride != 1:
            raise ValueError("1x1 convolutions are stride 1 only")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride = kernel, stride
        rng = np.random.default_rng() if rng is None else rng
        fan_in = in_ch * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kernel, kernel))
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(out_ch, dtype=dtype)}
        self.zero_grad()
        self._x_shape = None
        self._x = None

    def forward(self, x, training=False):
        b, c, h, w = x.shape
        if c != self.in_ch:
            raise ValueError(f"channel mismatch: layer expects {self.in_ch}, got {c}")
        wgt = self.params["weight"].reshape(self.out_ch, -1)
        if self.kernel == 1:
            self._x = x
            out = np.matmul(wgt, x.reshape(b, c, h * w))
            out += self.params["bias"][None, :, None]
            return out.reshape(b, self.out_ch, h, w)
        ho, wo = -(-h // self.stride), -(-w // self.stride)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        self._x = xp
        self._x_shape = x.shape
        cols = _im2col3(xp, self.stride, ho, wo)
        out = np.matmul(wgt, cols)
        out += self.params["bias"][None, :, None]
        return out.reshape(b, self.out_ch, ho, wo)

    def backward(self, grad):
        b, o, ho, wo = grad.shape
        g2 = grad.reshape(b, o, ho * wo)
        wgt = self.params["weight"].reshape(o, -1)
        self.grads["bias"] += g2.sum(axis=(0, 2))
        if self.kernel == 1:
            x = self._x
            c = x.shape[1]
            x2 = x.reshape(b, c, ho * wo)
            self.grads["weight"] += np.tensordot(g2, x2, axes=([0, 2], [0, 2])).reshape(o, c, 1, 1)
            return np.matmul(wgt.T, g2).reshape(x.shape)
        xp = self._x
        c = xp.shape[1]
        cols = _im2col3(xp, self.stride, ho, wo)
        self.grads["weight"] += np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(self.params["weight"].shape)
        dcols = np.matmul(wgt.T, g2).reshape(b, c, 9, ho, wo)
        dxp = np.zeros_like(xp)
        s = self.stride
        for dy in range(3):
            for dx in range(3):
                dxp[:, :, dy:dy + s * ho:s, dx:dx + s * wo:s] += dcols[:, :, 3 * dy + dx]
        h, w = self._x_shape[2:]
        return dxp[:, :, 1:h + 1, 1:w + 1]


class GroupNorm(Layer):
    def __init__(self, channels, groups, eps=1e-5, dtype=np.float32):
        super().__init__()
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        self.channels, self.groups, self.eps = channels, groups, eps
        self.params = {"gamma": np.ones(channels, dtype=dtype), "beta": np.zeros(channels, dtype=dtype)}
        self.zero_grad()

    def forward(self, x, training=False):
        b, c, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"channel mismatch: layer expects {self.channels}, got {c}")
        xg = x.reshape(b, self.groups, -1)
        mean = xg.mean(axis=2, keepdims=True)
        xc = xg - mean
        var = np.mean(xc * xc, axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (xc * inv).reshape(x.shape)
        self._xhat, self._inv = xhat, inv
        return xhat * self.params["gamma"][None, :, None, None] + self.params["beta"][None, :, None, None]

    def backward(self, grad):
        xhat, inv = self._xhat, self._inv
        b, c = grad.shape[:2]
        self.grads["gamma"] += np.sum(grad * xhat, axis=(0, 2, 3))
        self.grads["beta"] += np.sum(grad, axis=(0, 2, 3))
        dxhat = (grad * self.params["gamma"][None, :, None, None]).reshape(b, self.groups, -1)
        xh = xhat.reshape(b, self.groups, -1)
        n = xh.shape[2]
        dx = inv / n * (n * dxhat - dxhat.sum(axis=2, keepdims=True)
                        - xh * np.sum(dxhat * xh, axis=2, keepdims=True))
        return dx.reshape(grad.shape)


class ReLU(Layer):
    def forward(self, x, training=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return np.where(self._mask, grad, 0).astype(grad.dtype, copy=False)


class Sigmoid(Layer):
    def forward(self, x, training=False):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._y = out
        return out

    def backward(self, grad):
        y = self._y
        return grad * y * (1.0 - y)


class SpatialDropout(Layer):
    """Zeroes whole channels with probability ``p`` during training."""

    def __init__(self, p, rng=None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.p = p
        self.rng = np.random.default_rng() if rng is None else rng
        self._scale = None

    def forward(self, x, training=False):
        if not training or self.p == 0.0:
            self._scale = None
            return x
        keep = self.rng.random(x.shape[:2]) >= self.p
        self._scale = (keep / (1.0 - self.p)).astype(x.dtype)[:, :, None, None]
        return x * self._scale

    def backward(self, grad):
        if self._scale is None:
            return grad
        return grad * self._scale


def _up1d(x, axis):
    x = np.moveaxis(x, axis, -1)
    xp = np.concatenate([x[..., :1], x, x[..., -1:]], axis=-1)
    out = np.empty(x.shape[:-1] + (2 * x.shape[-1],), dtype=x.dtype)
    out[..., 0::2] = 0.25 * xp[..., :-2] + 0.75 * x
    out[..., 1::2] = 0.75 * x + 0.25 * xp[..., 2:]
    return np.moveaxis(out, -1, axis)


def _up1d_adjoint(g, axis):
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (ge + go)
    # even outputs also read index k-1, odd outputs index k+1 (edge clamped)
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 0] += 0.25 * ge[..., 0]
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(out, -1, axis)


class BilinearUpsample(Layer):
    """Doubles height and width (half-pixel centres, edge clamped)."""

    def forward(self, x, training=False):
        return _up1d(_up1d(x, 2), 3)

    def backward(self, grad):
        return _up1d_adjoint(_up1d_adjoint(grad, 3), 2)


class ResBlock(Layer):
    """norm-relu-conv twice, plus the identity."""

    def __init__(self, channels, groups, rng=None, dtype=np.float32):
        super().__init__()
        self.norm1 = GroupNorm(channels, groups, dtype=dtype)
        self.relu1 = ReLU()
        self.conv1 = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)
        self.norm2 = GroupNorm(channels, groups, dtype=dtype)
        self.relu2 = ReLU()
        self.conv2 = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)
        self._seq = [self.norm1, self.relu1, self.conv1, self.norm2, self.relu2, self.conv2]

    def sublayers(self):
        return {"norm1": self.norm1, "conv1": self.conv1, "norm2": self.norm2, "conv2": self.conv2}

    def forward(self, x, training=False):
        h = x
        for layer in self._seq:
            h = layer.forward(h, training)
        return h + x

    def backward(self, grad):
        g = grad
        for layer in reversed(self._seq):
            g = layer.backward(g)
        return g + grad

    def zero_grad(self):
        for layer in self._seq:
            layer.zero_grad()
