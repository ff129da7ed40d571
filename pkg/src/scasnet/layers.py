"""Layers with explicit forward/backward passes.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into :class:`~scasnet.tensor.Param.grad`
during ``backward``. ``backward`` returns the gradient with respect to the
layer input(s).
"""
from functools import lru_cache

import numpy as np

from scasnet import kernels
from scasnet.tensor import BackwardError, Param, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Layer:
    """Base class. Subclasses set ``self._cache`` in forward."""

    _cache = None

    def params(self):
        return []

    def buffers(self):
        return {}

    def _take_cache(self):
        if self._cache is None:
            raise BackwardError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def _check_grad(self, grad, shape):
        if grad.shape != shape:
            raise ShapeError(f"{type(self).__name__}: upstream gradient {grad.shape} does not match output {shape}")


# --------------------------------------------------------------------------
# convolution


def conv_output_size(size, k, stride, dilation, padding):
    extent = (k - 1) * dilation + 1
    return (size + 2 * padding - extent) // stride + 1


def _conv_geometry(x_shape, w_shape, stride, dilation, padding):
    if len(x_shape) != 4:
        raise ShapeError(f"conv2d expects a 4-d input, got shape {x_shape}")
    out_ch, in_ch, kh, kw = w_shape
    if x_shape[1] != in_ch:
        raise ShapeError(f"conv2d: input has {x_shape[1]} channels, kernel expects {in_ch}")
    h, w = x_shape[2:]
    ext_h = (kh - 1) * dilation + 1
    ext_w = (kw - 1) * dilation + 1
    if ext_h > h + 2 * padding or ext_w > w + 2 * padding:
        raise ShapeError(
            f"conv2d: effective kernel {ext_h}x{ext_w} exceeds padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )
    return (
        conv_output_size(h, kh, stride, dilation, padding),
        conv_output_size(w, kw, stride, dilation, padding),
    )


def _pad(x, padding):
    if padding == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x, weight, bias=None, stride=1, dilation=1, padding=0):
    """Dilated 2-d cross-correlation with zero padding."""
    out_h, out_w = _conv_geometry(x.shape, weight.shape, stride, dilation, padding)
    out, _ = _conv_forward(x, weight, bias, stride, dilation, padding, out_h, out_w)
    return out


def _pointwise(weight, stride, padding):
    return weight.shape[2] == 1 and weight.shape[3] == 1 and stride == 1 and padding == 0


def _conv_forward(x, weight, bias, stride, dilation, padding, out_h, out_w):
    n = x.shape[0]
    out_ch = weight.shape[0]
    wmat = weight.reshape(out_ch, -1)
    if _pointwise(weight, stride, padding):
        cols = np.ascontiguousarray(x).reshape(n, x.shape[1], -1)
    else:
        xp = _pad(x, padding)
        cols = kernels.im2col(xp, weight.shape[2], weight.shape[3], stride, dilation, out_h, out_w)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias[None, :, None]
    return out.reshape(n, out_ch, out_h, out_w), cols


class Conv2d(Layer):
    """Convolution holding its weights, bias and geometry.

    ``padding=None`` selects the size-preserving padding
    ``dilation * (k - 1) // 2``, so a dilated 3x3 kernel gets
    ``padding == dilation``.
    """

    def __init__(self, in_ch, out_ch, k=3, stride=1, dilation=1, padding=None, name="conv", dtype=np.float64):
        if padding is None:
            padding = dilation * (k - 1) // 2
        if stride < 1 or dilation < 1 or padding < 0:
            raise ValueError("stride and dilation must be >= 1, padding >= 0")
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride, self.dilation, self.padding = stride, dilation, padding
        self.name = name
        self.weight = Param(np.zeros((out_ch, in_ch, k, k), dtype=dtype), f"{name}.weight")
        self.bias = Param(np.zeros(out_ch, dtype=dtype), f"{name}.bias", decay=False)

    def params(self):
        return [self.weight, self.bias]

    def he_init(self, rng):
        fan_in = self.in_ch * self.k * self.k
        w = rng.standard_normal(self.weight.shape) * np.sqrt(2.0 / fan_in)
        self.weight.value[...] = w
        self.bias.value[...] = 0.0

    def forward(self, x, train=False, rng=None):
        out_h, out_w = _conv_geometry(x.shape, self.weight.shape, self.stride, self.dilation, self.padding)
        out, cols = _conv_forward(
            x, self.weight.value, self.bias.value, self.stride, self.dilation, self.padding, out_h, out_w
        )
        self._cache = (x.shape, cols, out.shape)
        return out

    def backward(self, grad):
        x_shape, cols, out_shape = self._take_cache()
        self._check_grad(grad, out_shape)
        n, out_ch, out_h, out_w = out_shape
        g = grad.reshape(n, out_ch, out_h * out_w)
        self.weight.accumulate(np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.weight.shape))
        self.bias.accumulate(g.sum(axis=(0, 2)))
        wmat = self.weight.value.reshape(out_ch, -1)
        dcols = np.matmul(wmat.T, g)
        if _pointwise(self.weight.value, self.stride, self.padding):
            return dcols.reshape(x_shape)
        p = self.padding
        hp, wp = x_shape[2] + 2 * p, x_shape[3] + 2 * p
        dxp = kernels.col2im(dcols, x_shape[1], hp, wp, self.k, self.k, self.stride, self.dilation, out_h, out_w)
        if p:
            dxp = dxp[:, :, p:hp - p, p:wp - p]
        return np.ascontiguousarray(dxp)


# --------------------------------------------------------------------------
# pointwise layers


def relu(x):
    return np.maximum(x, 0.0)


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, grad):
        mask = self._take_cache()
        self._check_grad(grad, mask.shape)
        return np.where(mask, grad, 0.0).astype(grad.dtype, copy=False)


class Add(Layer):
    """Elementwise sum fusion of two equally shaped streams."""

    def forward(self, a, b, train=False, rng=None):
        if a.shape != b.shape:
            raise ShapeError(f"cannot sum tensors of shapes {a.shape} and {b.shape}")
        self._cache = a.shape
        return a + b

    def backward(self, grad):
        shape = self._take_cache()
        self._check_grad(grad, shape)
        return grad, grad


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""

    def __init__(self, rate=0.5):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._cache = None, x.shape
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = rng.random(x.shape) >= self.rate
        scale = np.asarray(1.0 / (1.0 - self.rate), dtype=x.dtype)
        mask = keep.astype(x.dtype) * scale
        self._cache = mask, x.shape
        return x * mask

    def backward(self, grad):
        if self._cache is None:
            raise BackwardError("Dropout.backward called before forward")
        mask, shape = self._cache
        self._check_grad(grad, shape)
        return grad if mask is None else grad * mask


# --------------------------------------------------------------------------
# pooling


class MaxPool2x2(Layer):
    """2x2/stride-2 max pooling. Odd sizes are replicate-padded first."""

    def forward(self, x, train=False, rng=None):
        h, w = x.shape[2:]
        ph, pw = h % 2, w % 2
        xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge") if (ph or pw) else x
        out, idx = kernels.maxpool2x2_forward(xp)
        self._cache = (x.shape, idx, out.shape)
        return out

    def backward(self, grad):
        x_shape, idx, out_shape = self._take_cache()
        self._check_grad(grad, out_shape)
        dxp = kernels.maxpool2x2_backward(grad, idx)
        h, w = x_shape[2:]
        if dxp.shape[2] != h:
            dxp[:, :, h - 1, :] += dxp[:, :, h, :]
        if dxp.shape[3] != w:
            dxp[:, :, :, w - 1] += dxp[:, :, :, w]
        return np.ascontiguousarray(dxp[:, :, :h, :w])


def maxpool2x2(x):
    """Return pooled output and the per-window argmax (0..3, row-major)."""
    layer = MaxPool2x2()
    out = layer.forward(x)
    return out, layer._cache[1]


# --------------------------------------------------------------------------
# batch normalization


class BatchNorm2d(Layer):
    def __init__(self, ch, eps=BN_EPS, momentum=BN_MOMENTUM, name="bn", dtype=np.float64):
        self.ch, self.eps, self.momentum, self.name = ch, eps, momentum, name
        self.gamma = Param(np.ones(ch, dtype=dtype), f"{name}.gamma", decay=False)
        self.beta = Param(np.zeros(ch, dtype=dtype), f"{name}.beta", decay=False)
        self.running_mean = np.zeros(ch, dtype=dtype)
        self.running_var = np.ones(ch, dtype=dtype)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def forward(self, x, train=False, rng=None):
        if x.shape[1] != self.ch:
            raise ShapeError(f"batchnorm: input has {x.shape[1]} channels, expected {self.ch}")
        n, _, h, w = x.shape
        count = n * h * w
        if train:
            if count < 2:
                raise ValueError("batchnorm: train mode needs more than one value per channel")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1 - m) * mean
            self.running_var[...] = m * self.running_var + (1 - m) * var * (count / (count - 1))
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, train, x.shape)
        return self.gamma.value[None, :, None, None] * xhat + self.beta.value[None, :, None, None]

    def backward(self, grad):
        xhat, inv_std, train, shape = self._take_cache()
        self._check_grad(grad, shape)
        self.beta.accumulate(grad.sum(axis=(0, 2, 3)))
        self.gamma.accumulate((grad * xhat).sum(axis=(0, 2, 3)))
        gscale = (self.gamma.value * inv_std)[None, :, None, None]
        if not train:
            return grad * gscale
        count = shape[0] * shape[2] * shape[3]
        gsum = grad.sum(axis=(0, 2, 3))[None, :, None, None]
        gxsum = (grad * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return gscale * (grad - gsum / count - xhat * gxsum / count)


# --------------------------------------------------------------------------
# bilinear resize (align corners)


@lru_cache(maxsize=256)
def _interp_matrix(n_in, n_out, dtype_str):
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        mat[:, 0] = 1.0
    elif n_out == 1:
        mat[0, 0] = 1.0
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        i0 = np.minimum(np.floor(src).astype(np.intp), n_in - 2)
        frac = src - i0
        rows = np.arange(n_out)
        mat[rows, i0] = 1.0 - frac
        mat[rows, i0 + 1] += frac
    mat = mat.astype(dtype_str)
    mat.setflags(write=False)
    return mat


def interp_matrix(n_in, n_out, dtype=np.float64):
    """Row ``o`` holds the align-corners weights of output sample ``o``."""
    return _interp_matrix(int(n_in), int(n_out), np.dtype(dtype).str)


def bilinear_resize(x, out_h, out_w):
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    ry = interp_matrix(h, out_h, x.dtype)
    rx = interp_matrix(w, out_w, x.dtype)
    return np.matmul(np.matmul(ry, x), rx.T)


class BilinearResize(Layer):
    def forward(self, x, size, train=False, rng=None):
        out_h, out_w = size
        self._cache = (x.shape, (out_h, out_w))
        return bilinear_resize(x, out_h, out_w)

    def backward(self, grad):
        x_shape, (out_h, out_w) = self._take_cache()
        self._check_grad(grad, x_shape[:-2] + (out_h, out_w))
        h, w = x_shape[-2:]
        if (h, w) == (out_h, out_w):
            return grad
        ry = interp_matrix(h, out_h, grad.dtype)
        rx = interp_matrix(w, out_w, grad.dtype)
        return np.matmul(np.matmul(ry.T, grad), rx)


# --------------------------------------------------------------------------
# softmax


def softmax_channels(x):
    """Softmax over axis 1 with max subtraction."""
    if x.shape[1] < 2:
        raise ShapeError(f"softmax needs at least two channels, got {x.shape[1]}")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Softmax(Layer):
    def forward(self, x, train=False, rng=None):
        p = softmax_channels(x)
        self._cache = p
        return p

    def backward(self, grad):
        p = self._take_cache()
        self._check_grad(grad, p.shape)
        return p * (grad - (grad * p).sum(axis=1, keepdims=True))
