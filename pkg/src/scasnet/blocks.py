"""Residual correction, multi-scale context aggregation, and refinement."""
import numpy as np

from scasnet.layers import Add, BilinearResize, Conv2d, Layer, ReLU
from scasnet.tensor import ShapeError


class ResidualCorrection(Layer):
    """``f + H(f)`` with ``H = conv1x1 -> ReLU -> conv3x3 -> ReLU -> conv1x1``.

    The last 1x1 conv starts at zero so the block is the identity map at
    initialization.
    """

    def __init__(self, ch, name="rec", dtype=np.float64):
        self.ch = ch
        self.name = name
        self.conv_a = Conv2d(ch, ch, 1, name=f"{name}.conv_a", dtype=dtype)
        self.conv_b = Conv2d(ch, ch, 3, padding=1, name=f"{name}.conv_b", dtype=dtype)
        self.conv_c = Conv2d(ch, ch, 1, name=f"{name}.conv_c", dtype=dtype)
        self.relu_a = ReLU()
        self.relu_b = ReLU()

    def params(self):
        return self.conv_a.params() + self.conv_b.params() + self.conv_c.params()

    def init(self, rng):
        self.conv_a.he_init(rng)
        self.conv_b.he_init(rng)
        # conv_c stays zero

    def inner(self, f, train=False):
        h = self.relu_a.forward(self.conv_a.forward(f, train))
        h = self.relu_b.forward(self.conv_b.forward(h, train))
        return self.conv_c.forward(h, train)

    def forward(self, f, train=False, rng=None):
        if f.ndim != 4 or f.shape[1] != self.ch:
            raise ShapeError(f"residual correction {self.name} expects {self.ch} channels, got shape {f.shape}")
        self._cache = f.shape
        return f + self.inner(f, train)

    def backward(self, grad):
        shape = self._take_cache()
        self._check_grad(grad, shape)
        g = self.conv_c.backward(grad)
        g = self.conv_a.backward(self.relu_a.backward(self.conv_b.backward(self.relu_b.backward(g))))
        return grad + g


def residual_correct(f, block):
    return block.forward(f)


class _Identity(Layer):
    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x

    def backward(self, grad):
        self._take_cache()
        return grad


def _correction(ch, enabled, name, dtype):
    return ResidualCorrection(ch, name=name, dtype=dtype) if enabled else _Identity()


class ContextAggregator(Layer):
    """Dilated 3x3 branches over the encoder output, fused by summation.

    ``mode="cascaded"`` folds branches from the largest dilation rate to the
    smallest, correcting after every fusion; ``mode="parallel_stack"`` sums all
    branches at once and corrects once.
    """

    MODES = ("cascaded", "parallel_stack")

    def __init__(self, in_ch, width, rates, mode="cascaded", correct=True, name="ctx", dtype=np.float64):
        rates = [int(r) for r in rates]
        if len(rates) < 2:
            raise ValueError("context aggregation needs at least two dilation rates")
        if any(a <= b for a, b in zip(rates, rates[1:])):
            raise ValueError(f"dilation rates must be strictly decreasing, got {rates}")
        if mode not in self.MODES:
            raise ValueError(f"unknown aggregation mode {mode!r}")
        self.rates, self.mode, self.correct, self.name = rates, mode, correct, name
        self.in_ch, self.width = in_ch, width
        self.branches = [Conv2d(in_ch, width, 3, dilation=d, name=f"{name}.branch{d}", dtype=dtype) for d in rates]
        self.branch_relus = [ReLU() for _ in rates]
        n_fusions = len(rates) - 1 if mode == "cascaded" else 1
        self.fusions = [Add() for _ in range(len(rates) - 1)]
        self.corrections = [
            _correction(width, correct, f"{name}.rec{i}", dtype) for i in range(n_fusions)
        ]

    def params(self):
        out = []
        for b in self.branches:
            out += b.params()
        for c in self.corrections:
            out += c.params()
        return out

    def init(self, rng):
        for b in self.branches:
            b.he_init(rng)
        for c in self.corrections:
            if isinstance(c, ResidualCorrection):
                c.init(rng)

    def forward(self, x, train=False, rng=None):
        ts = [r.forward(b.forward(x, train)) for b, r in zip(self.branches, self.branch_relus)]
        if self.mode == "cascaded":
            acc = ts[0]
            for t, fuse, corr in zip(ts[1:], self.fusions, self.corrections):
                acc = corr.forward(fuse.forward(acc, t), train)
        else:
            acc = ts[0]
            for t, fuse in zip(ts[1:], self.fusions):
                acc = fuse.forward(acc, t)
            acc = self.corrections[0].forward(acc, train)
        self._cache = acc.shape
        return acc

    def backward(self, grad):
        shape = self._take_cache()
        self._check_grad(grad, shape)
        n = len(self.branches)
        branch_grads = [None] * n
        g = grad
        if self.mode == "cascaded":
            for i in range(n - 1, 0, -1):
                g = self.corrections[i - 1].backward(g)
                g, branch_grads[i] = self.fusions[i - 1].backward(g)
        else:
            g = self.corrections[0].backward(g)
            for i in range(n - 1, 0, -1):
                g, branch_grads[i] = self.fusions[i - 1].backward(g)
        branch_grads[0] = g
        dx = None
        for b, r, bg in zip(self.branches, self.branch_relus, branch_grads):
            d = b.backward(r.backward(bg))
            dx = d if dx is None else dx + d
        return dx


def aggregate_contexts(enc_out, agg):
    return agg.forward(enc_out)


class RefinementStep(Layer):
    """Fuse a coarse decoder stream with a finer encoder feature map.

    ``ReLU(proj_m(M)) + ReLU(proj_f(F))`` is corrected and resized to the
    target size. ``M`` is first resized to the resolution of ``F``.
    """

    def __init__(self, m_ch, f_ch, width, correct=True, name="ref", dtype=np.float64):
        self.name = name
        self.width = width
        self.proj_m = Conv2d(m_ch, width, 1, name=f"{name}.proj_m", dtype=dtype)
        self.proj_f = Conv2d(f_ch, width, 1, name=f"{name}.proj_f", dtype=dtype)
        self.relu_m = ReLU()
        self.relu_f = ReLU()
        self.fuse = Add()
        self.correction = _correction(width, correct, f"{name}.rec", dtype)
        self.resize_in = BilinearResize()
        self.resize_out = BilinearResize()

    def params(self):
        return self.proj_m.params() + self.proj_f.params() + self.correction.params()

    def init(self, rng):
        self.proj_m.he_init(rng)
        self.proj_f.he_init(rng)
        if isinstance(self.correction, ResidualCorrection):
            self.correction.init(rng)

    def forward(self, m_prev, f_shallow, target_size=None, train=False, rng=None):
        fh, fw = f_shallow.shape[2:]
        if m_prev.shape[2] > fh or m_prev.shape[3] > fw:
            raise ShapeError(
                f"refinement expects the shallow map {f_shallow.shape[2:]} to be at least as fine as "
                f"the decoder map {m_prev.shape[2:]}"
            )
        m = self.resize_in.forward(m_prev, (fh, fw))
        a = self.relu_m.forward(self.proj_m.forward(m, train))
        b = self.relu_f.forward(self.proj_f.forward(f_shallow, train))
        fused = self.correction.forward(self.fuse.forward(a, b), train)
        out = self.resize_out.forward(fused, target_size or (fh, fw))
        self._cache = out.shape
        return out

    def backward(self, grad):
        shape = self._take_cache()
        self._check_grad(grad, shape)
        g = self.correction.backward(self.resize_out.backward(grad))
        ga, gb = self.fuse.backward(g)
        df = self.proj_f.backward(self.relu_f.backward(gb))
        dm = self.resize_in.backward(self.proj_m.backward(self.relu_m.backward(ga)))
        return dm, df


def refine(m_prev, f_shallow, step, target_size=None):
    return step.forward(m_prev, f_shallow, target_size)
