"""Hot inner loops: dilated im2col/col2im and 2x2 max pooling.

Two interchangeable backends exist. The compiled one (``scasnet._kernels``,
built from Cython) is used when importable; otherwise the numpy versions in
this module are used. Set ``SCASNET_BACKEND=numpy`` to force the fallback.
Both backends produce bit-identical results.
"""
import contextlib
import os

import numpy as np

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
    "numpy_backend",
    "compiled_backend",
    "use_backend",
]


def _tap_slices(i, j, stride, dilation, out_h, out_w):
    h0 = i * dilation
    w0 = j * dilation
    return (
        slice(h0, h0 + stride * (out_h - 1) + 1, stride),
        slice(w0, w0 + stride * (out_w - 1) + 1, stride),
    )


def im2col_numpy(xp, kh, kw, stride, dilation, out_h, out_w):
    """Unfold a padded (N, C, Hp, Wp) array into (N, C*kh*kw, out_h*out_w)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            hs, ws = _tap_slices(i, j, stride, dilation, out_h, out_w)
            cols[:, :, i, j] = xp[:, :, hs, ws]
    return cols.reshape(n, c * kh * kw, out_h * out_w)


def col2im_numpy(cols, channels, hp, wp, kh, kw, stride, dilation, out_h, out_w):
    """Adjoint of :func:`im2col_numpy`: scatter-add columns into a padded image."""
    n = cols.shape[0]
    cols = cols.reshape(n, channels, kh, kw, out_h, out_w)
    out = np.zeros((n, channels, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            hs, ws = _tap_slices(i, j, stride, dilation, out_h, out_w)
            out[:, :, hs, ws] += cols[:, :, i, j]
    return out


def maxpool2x2_forward_numpy(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    # np.argmax returns the first maximum, i.e. row-major tie breaking
    idx = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward_numpy(grad, idx):
    n, c, oh, ow = grad.shape
    win = np.zeros((n, c, oh, ow, 4), dtype=grad.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), grad[..., None], axis=-1)
    win = win.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(win.reshape(n, c, 2 * oh, 2 * ow))


class _Backend:
    def __init__(self, name, im2col, col2im, pool_fwd, pool_bwd):
        self.name = name
        self.im2col = im2col
        self.col2im = col2im
        self.maxpool2x2_forward = pool_fwd
        self.maxpool2x2_backward = pool_bwd

    def __repr__(self):
        return f"<kernel backend {self.name!r}>"


numpy_backend = _Backend(
    "numpy",
    im2col_numpy,
    col2im_numpy,
    maxpool2x2_forward_numpy,
    maxpool2x2_backward_numpy,
)


def _load_compiled():
    try:
        from scasnet import _kernels
    except ImportError:
        return None

    def im2col(xp, kh, kw, stride, dilation, out_h, out_w):
        return _kernels.im2col(np.ascontiguousarray(xp), kh, kw, stride, dilation, out_h, out_w)

    def col2im(cols, channels, hp, wp, kh, kw, stride, dilation, out_h, out_w):
        return _kernels.col2im(
            np.ascontiguousarray(cols), channels, hp, wp, kh, kw, stride, dilation, out_h, out_w
        )

    def pool_fwd(x):
        return _kernels.maxpool2x2_forward(np.ascontiguousarray(x))

    def pool_bwd(grad, idx):
        return _kernels.maxpool2x2_backward(np.ascontiguousarray(grad), np.ascontiguousarray(idx))

    return _Backend("cython", im2col, col2im, pool_fwd, pool_bwd)


compiled_backend = _load_compiled()

if compiled_backend is not None and os.environ.get("SCASNET_BACKEND", "").lower() != "numpy":
    _active = compiled_backend
else:
    _active = numpy_backend

BACKEND = _active.name
im2col = _active.im2col
col2im = _active.col2im
maxpool2x2_forward = _active.maxpool2x2_forward
maxpool2x2_backward = _active.maxpool2x2_backward


@contextlib.contextmanager
def use_backend(backend):
    """Temporarily route the module-level kernels through ``backend``."""
    global BACKEND, im2col, col2im, maxpool2x2_forward, maxpool2x2_backward
    saved = BACKEND, im2col, col2im, maxpool2x2_forward, maxpool2x2_backward
    BACKEND = backend.name
    im2col, col2im = backend.im2col, backend.col2im
    maxpool2x2_forward, maxpool2x2_backward = backend.maxpool2x2_forward, backend.maxpool2x2_backward
    try:
        yield backend
    finally:
        BACKEND, im2col, col2im, maxpool2x2_forward, maxpool2x2_backward = saved
