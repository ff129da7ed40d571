"""Loss, SGD with momentum and step decay, the training loop, gradient checks."""
import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from scasnet.layers import Layer
from scasnet.model import ConfigError, ScasNet, _from_dict
from scasnet.tensor import NumericalError, ShapeError

log = logging.getLogger(__name__)


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""


# ----------------------------------------------------------------------- loss


@dataclass
class LossOutput:
    loss: float
    grad: np.ndarray
    probs: np.ndarray


def cross_entropy_loss(logits, labels, ignore_mask=None):
    """Mean per-pixel cross entropy over the non-ignored pixels of a batch.

    ``labels`` has shape [N, H, W]; ``ignore_mask`` (same shape, True =
    skip) is optional. The gradient w.r.t. the logits is
    ``(p_k - [y == k]) / count`` at counted pixels and zero elsewhere.
    """
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), found range [{labels.min()}, {labels.max()}]")
    keep = np.ones((n, h, w), dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask, dtype=bool)
    count = int(keep.sum())
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp_y = np.take_along_axis(z, labels[:, None].astype(np.intp), axis=1)[:, 0] - logsum
    probs = np.exp(z - logsum[:, None])
    if count == 0:
        return LossOutput(0.0, np.zeros_like(logits), probs)
    loss = float(-(logp_y[keep]).sum() / count)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[:, None].astype(np.intp), 1.0, axis=1)
    grad = (probs - onehot) * (keep[:, None] / count)
    return LossOutput(loss, grad.astype(logits.dtype, copy=False), probs)


# ------------------------------------------------------------------ optimizer


@dataclass
class TrainConfig:
    lr0: float = 0.01
    lr_drop_factor: float = 0.1
    lr_drop_every: int = 20
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 4
    epochs: int = 80
    # None = one full pass over the data per epoch
    steps_per_epoch: int = None
    save_every: int = 0
    seed: int = 0

    @classmethod
    def from_dict(cls, data, where="train"):
        return _from_dict(cls, data, where)

    def to_dict(self):
        return asdict(self)

    def validate(self):
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if not 0 < self.lr_drop_factor <= 1:
            raise ConfigError("lr_drop_factor must lie in (0, 1]")
        if self.lr_drop_every < 1:
            raise ConfigError("lr_drop_every must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1 when set")
        return self


def learning_rate(cfg, epoch):
    return cfg.lr0 * cfg.lr_drop_factor ** (epoch // cfg.lr_drop_every)


def sgd_step(params, grads, state, cfg, epoch, decay_mask=None):
    """One momentum SGD update in place.

    ``v <- momentum * v + grad + weight_decay * param``;
    ``param <- param - lr(epoch) * v``. ``state`` is the list of velocities
    (created on first use when empty).
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state:
        state.extend(np.zeros_like(p) for p in params)
    lr = learning_rate(cfg, epoch)
    for i, (p, g, v) in enumerate(zip(params, grads, state)):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"parameter {i}: shapes {p.shape}, grad {g.shape}, velocity {v.shape} differ")
        v *= cfg.momentum
        v += g
        if cfg.weight_decay and (decay_mask is None or decay_mask[i]):
            v += cfg.weight_decay * p
        p -= lr * v
    return params


class SGD:
    def __init__(self, params, cfg, velocity=None):
        self.params = params
        self.cfg = cfg
        self.velocity = list(velocity) if velocity is not None else []
        self.decay_mask = [p.decay for p in params]

    def step(self, epoch):
        sgd_step(
            [p.value for p in self.params], [p.grad for p in self.params],
            self.velocity, self.cfg, epoch, self.decay_mask,
        )


# ----------------------------------------------------------------------- loop


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float


def _batches(n, cfg, epoch):
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    if cfg.steps_per_epoch is not None:
        need = cfg.steps_per_epoch * cfg.batch_size
        reps = -(-need // n)
        order = np.concatenate(
            [order] + [np.random.default_rng([cfg.seed, epoch, r]).permutation(n) for r in range(1, reps)]
        )[:need]
    return [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]


def train_loop(model, images, labels, cfg, start_epoch=0, velocity=None, history=None, on_epoch=None):
    """Shuffle, batch, forward, loss, backward and update for each epoch.

    ``images`` is [N, C, H, W] and ``labels`` [N, H, W]. Returns the
    optimizer and the list of :class:`EpochRecord`. ``on_epoch(record,
    optimizer)`` is called after each epoch.
    """
    cfg.validate()
    n = len(images)
    if n == 0:
        raise ValueError("training set is empty")
    if len(labels) != n:
        raise ShapeError("images and labels differ in length")
    history = list(history or [])
    params = model.params()
    opt = SGD(params, cfg, velocity)
    for epoch in range(start_epoch, cfg.epochs):
        total, batches = 0.0, 0
        for step, idx in enumerate(_batches(n, cfg, epoch)):
            x = np.asarray(images[idx], dtype=model.dtype)
            y = np.asarray(labels[idx])
            model.zero_grad()
            logits = model.forward(x, train=True, seed=[cfg.seed, epoch, step])
            out = cross_entropy_loss(logits, y)
            if not np.isfinite(out.loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            model.backward(out.grad)
            opt.step(epoch)
            total += out.loss
            batches += 1
        rec = EpochRecord(epoch, total / batches, learning_rate(cfg, epoch))
        history.append(rec)
        log.info("epoch %d loss %.6f lr %.6g", rec.epoch, rec.mean_loss, rec.lr)
        if on_epoch is not None:
            on_epoch(rec, opt)
    return opt, history


def history_csv(history):
    lines = ["epoch,mean_loss,lr"]
    lines += [f"{r.epoch},{r.mean_loss:.10g},{r.lr:.10g}" for r in history]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ gradcheck


@dataclass
class GradcheckReport:
    max_rel_err: float
    mean_rel_err: float
    checked: int
    tol: float
    worst: str

    @property
    def passed(self):
        return self.max_rel_err <= self.tol

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict} max_rel_err={self.max_rel_err:.3e} mean_rel_err={self.mean_rel_err:.3e} "
            f"checked={self.checked} tol={self.tol:g} worst={self.worst}"
        )


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(objective, arrays, analytic, names, sample_count, tol, seed=0):
    """Compare ``analytic`` grads with central differences of ``objective``.

    ``arrays`` are perturbed in place; coordinates are sampled uniformly over
    all of them. Step is ``1e-5 * max(1, |x|)``.
    """
    sizes = np.array([a.size for a in arrays])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if sample_count >= total else rng.choice(total, size=sample_count, replace=False)
    bounds = np.cumsum(sizes)
    errs = []
    worst, worst_err = "", -1.0
    for flat in np.sort(picks):
        which = int(np.searchsorted(bounds, flat, side="right"))
        local = int(flat - (bounds[which - 1] if which else 0))
        arr = arrays[which].reshape(-1)
        orig = arr[local]
        h = 1e-5 * max(1.0, abs(orig))
        arr[local] = orig + h
        fp = objective()
        arr[local] = orig - h
        fm = objective()
        arr[local] = orig
        numeric = (fp - fm) / (2 * h)
        err = relative_error(float(analytic[which].reshape(-1)[local]), numeric)
        errs.append(err)
        if err > worst_err:
            worst, worst_err = f"{names[which]}[{local}]", err
    errs = np.array(errs)
    return GradcheckReport(float(errs.max()), float(errs.mean()), len(errs), tol, worst)


def perturb_for_gradcheck(model, seed=0, scale=0.1):
    """Move a freshly built model off exact ReLU kinks.

    Zero biases and zero-initialized correction convs leave many
    activations at exactly 0, where the network is not differentiable and
    central differences see half a slope. Random biases and small random
    final correction weights avoid that and exercise every path.
    """
    rng = np.random.default_rng([seed, 104729])
    for p in model.params():
        if p.name.endswith(".bias"):
            p.value[...] = rng.normal(0.0, scale, p.shape)
        elif p.name.endswith("conv_c.weight"):
            p.value[...] = rng.normal(0.0, scale, p.shape)
    return model


def gradcheck(target, inputs, sample_count=200, tol=1e-4, seed=0, labels=None, forward_kwargs=None, train=False):
    """Finite-difference check of a layer or a whole model.

    For a :class:`ScasNet` the objective is the cross-entropy loss against
    ``labels`` (random if omitted); for a layer it is ``sum(out * R)`` with a
    fixed random ``R``. Train-mode dropout reuses one seed for every
    evaluation so the mask is held fixed.
    """
    if not isinstance(inputs, (tuple, list)):
        inputs = (inputs,)
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    kwargs = dict(forward_kwargs or {})
    # separate stream so probe weights never coincide with seed-derived inputs
    rng = np.random.default_rng([seed, 7919])

    if isinstance(target, ScasNet):
        x = inputs[0]
        if labels is None:
            labels = rng.integers(0, target.cfg.num_classes, size=(x.shape[0],) + x.shape[2:])

        def run():
            return target.forward(x, train=train, seed=seed)

        def objective():
            return cross_entropy_loss(run(), labels).loss

        target.zero_grad()
        out = cross_entropy_loss(run(), labels)
        grads_in = [target.backward(out.grad)]
        params = target.params()
    else:
        if not isinstance(target, Layer):
            raise TypeError("gradcheck target must be a Layer or a ScasNet")
        probe = _layer_forward(target, inputs, kwargs, train, seed)
        weights = rng.standard_normal(probe.shape)

        def objective():
            return float((_layer_forward(target, inputs, kwargs, train, seed) * weights).sum())

        for p in target.params():
            p.zero_grad()
        _layer_forward(target, inputs, kwargs, train, seed)
        g = target.backward(weights)
        grads_in = list(g) if isinstance(g, tuple) else [g]
        params = target.params()

    arrays = inputs + [p.value for p in params]
    analytic = grads_in + [p.grad.copy() for p in params]
    names = [f"input{i}" for i in range(len(inputs))] + [p.name for p in params]
    return check_gradients(objective, arrays, analytic, names, sample_count, tol, seed)


def _layer_forward(layer, inputs, kwargs, train, seed):
    if train:
        kwargs = dict(kwargs, train=True, rng=np.random.default_rng(seed))
    return layer.forward(*inputs, **kwargs)


def gradcheck_suite(seed=0, sample_count=200, layer_tol=1e-4, model_tol=1e-3):
    """Every layer type, the composite blocks and the desk model, in float64.

    Returns ``[(name, GradcheckReport), ...]``. Dropout is checked with its
    mask held fixed; the model runs in eval mode on a 1x3x16x16 input with
    K = 2.
    """
    from scasnet.blocks import ContextAggregator, RefinementStep, ResidualCorrection
    from scasnet.layers import Add, BatchNorm2d, BilinearResize, Conv2d, Dropout, MaxPool2x2, ReLU, Softmax
    from scasnet.model import ModelConfig

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 7, 7))
    out = []

    def run(name, target, inputs, tol=layer_tol, **kw):
        out.append((name, gradcheck(target, inputs, sample_count=sample_count, tol=tol, seed=seed, **kw)))

    for d in (1, 2, 3):
        conv = Conv2d(3, 4, 3, dilation=d)
        conv.he_init(rng)
        conv.bias.value[...] = rng.normal(0, 0.1, 4)
        run(f"conv3x3_d{d}", conv, x)
    conv = Conv2d(3, 4, 3, stride=2)
    conv.he_init(rng)
    run("conv3x3_s2", conv, x)
    run("relu", ReLU(), x)
    run("maxpool2x2", MaxPool2x2(), x)
    bn = BatchNorm2d(3)
    bn.gamma.value[...] = rng.standard_normal(3)
    bn.beta.value[...] = rng.standard_normal(3)
    run("batchnorm_train", bn, x, train=True)
    bn.running_var[...] = rng.uniform(0.5, 2.0, 3)
    run("batchnorm_eval", bn, x)
    run("dropout_fixed_mask", Dropout(0.5), x, train=True)
    run("bilinear_resize", BilinearResize(), x, forward_kwargs={"size": (11, 5)})
    run("elementwise_sum", Add(), (x, rng.standard_normal(x.shape)))
    run("softmax", Softmax(), x)

    def loss_layer_check():
        logits = rng.standard_normal((2, 4, 5, 5))
        labels = rng.integers(0, 4, (2, 5, 5))
        analytic = cross_entropy_loss(logits, labels).grad
        return check_gradients(
            lambda: cross_entropy_loss(logits, labels).loss, [logits], [analytic], ["logits"],
            sample_count, layer_tol, seed,
        )

    out.append(("softmax_cross_entropy", loss_layer_check()))

    rec = ResidualCorrection(3)
    rec.init(rng)
    rec.conv_c.he_init(rng)
    run("residual_correction", rec, x)
    for mode in ("cascaded", "parallel_stack"):
        agg = ContextAggregator(3, 4, [3, 2, 1], mode=mode)
        agg.init(rng)
        for c in agg.corrections:
            c.conv_c.he_init(rng)
        run(f"context_{mode}", agg, x)
    step = RefinementStep(3, 2, 4)
    step.init(rng)
    step.correction.conv_c.he_init(rng)
    run("refinement", step, (rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 2, 8, 8))),
        forward_kwargs={"target_size": (12, 12)})

    model = ScasNet(ModelConfig(num_classes=2, dtype="float64"), seed)
    perturb_for_gradcheck(model, seed)
    run("desk_model", model, rng.standard_normal((1, 3, 16, 16)), tol=model_tol)
    return out
