"""The full network: encoder, context aggregation, refinement, classifier.

Also holds parameter initialization, prediction, and checkpoint I/O.
"""
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from scasnet.blocks import ContextAggregator, RefinementStep
from scasnet.layers import BatchNorm2d, BilinearResize, Conv2d, Dropout, MaxPool2x2, ReLU, softmax_channels
from scasnet.tensor import ShapeError, load_tensor, save_tensor

CHECKPOINT_VERSION = 1
AGGREGATIONS = ("cascaded", "parallel_stack", "none")


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


def _from_dict(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return cls(**data)


@dataclass
class StageConfig:
    convs: int = 2
    width: int = 16
    pool: bool = True


def _desk_stages():
    return [
        StageConfig(1, 16, True),
        StageConfig(1, 32, True),
        StageConfig(1, 64, True),
        StageConfig(1, 64, False),
    ]


@dataclass
class ModelConfig:
    stages: list = field(default_factory=_desk_stages)
    in_channels: int = 3
    dilation_rates: list = field(default_factory=lambda: [4, 3, 2, 1])
    aggregation: str = "cascaded"
    context_width: int = 64
    context_correction: bool = True
    # 1-based stage indices, coarse to fine
    refine_taps: list = field(default_factory=lambda: [3, 2])
    refine_width: int = 32
    refine_correction: bool = True
    num_classes: int = 5
    dropout: float = 0.5
    use_batchnorm: bool = False
    dtype: str = "float64"

    @classmethod
    def from_dict(cls, data, where="model"):
        data = dict(data)
        if "stages" in data:
            data["stages"] = [
                s if isinstance(s, StageConfig) else _from_dict(StageConfig, s, f"{where}.stages[{i}]")
                for i, s in enumerate(data["stages"])
            ]
        return _from_dict(cls, data, where)

    def to_dict(self):
        return asdict(self)

    @property
    def stride(self):
        return 2 ** sum(1 for s in self.stages if s.pool)

    def stage_strides(self):
        out, stride = [], 1
        for s in self.stages:
            out.append(stride)
            if s.pool:
                stride *= 2
        return out

    def validate(self):
        if not self.stages:
            raise ConfigError("model needs at least one encoder stage")
        for i, s in enumerate(self.stages):
            if s.convs < 1 or s.width < 1:
                raise ConfigError(f"stage {i + 1}: convs and width must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be positive")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.aggregation != "none":
            rates = list(self.dilation_rates)
            if len(rates) < 2 or any(a <= b for a, b in zip(rates, rates[1:])) or rates[-1] < 1:
                raise ConfigError(f"dilation rates must be >= 2 positive, strictly decreasing values, got {rates}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        taps = list(self.refine_taps)
        n = len(self.stages)
        strides = self.stage_strides()
        for t in taps:
            if not 1 <= t < n:
                raise ConfigError(f"refinement tap {t} must name a stage shallower than the last ({n})")
        if any(a <= b for a, b in zip(taps, taps[1:])):
            raise ConfigError(f"refinement taps must move to strictly shallower stages, got {taps}")
        prev = strides[-1] * (2 if self.stages[-1].pool else 1)
        for t in taps:
            if strides[t - 1] > prev:
                raise ConfigError(f"refinement tap {t} is coarser than the stream it refines")
            prev = strides[t - 1]
        if self.aggregation != "none" and self.context_width < 1:
            raise ConfigError("context_width must be positive")
        if taps and self.refine_width < 1:
            raise ConfigError("refine_width must be positive")
        return self


class _EncoderStage:
    def __init__(self, index, in_ch, cfg, use_bn, dtype):
        self.index = index
        self.layers = []
        ch = in_ch
        for j in range(cfg.convs):
            name = f"enc{index}.conv{j + 1}"
            self.layers.append(Conv2d(ch, cfg.width, 3, name=name, dtype=dtype))
            if use_bn:
                self.layers.append(BatchNorm2d(cfg.width, name=f"enc{index}.bn{j + 1}", dtype=dtype))
            self.layers.append(ReLU())
            ch = cfg.width
        self.pool = MaxPool2x2() if cfg.pool else None
        self.width = cfg.width

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out


class ScasNet:
    """Encoder -> context aggregation -> refinement -> dropout -> 1x1 classifier."""

    def __init__(self, cfg, seed=0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        dtype = np.dtype(cfg.dtype)
        self.dtype = dtype
        self.stages = []
        ch = cfg.in_channels
        for i, s in enumerate(cfg.stages):
            st = _EncoderStage(i + 1, ch, s, cfg.use_batchnorm, dtype)
            self.stages.append(st)
            ch = st.width
        if cfg.aggregation == "none":
            self.context = None
        else:
            self.context = ContextAggregator(
                ch, cfg.context_width, cfg.dilation_rates, mode=cfg.aggregation,
                correct=cfg.context_correction, name="ctx", dtype=dtype,
            )
            ch = cfg.context_width
        self.refinements = []
        for i, tap in enumerate(cfg.refine_taps):
            step = RefinementStep(
                ch, self.stages[tap - 1].width, cfg.refine_width,
                correct=cfg.refine_correction, name=f"ref{i + 1}", dtype=dtype,
            )
            self.refinements.append(step)
            ch = cfg.refine_width
        self.dropout = Dropout(cfg.dropout)
        self.classifier = Conv2d(ch, cfg.num_classes, 1, name="classifier", dtype=dtype)
        self.final_resize = BilinearResize()
        self._init(seed)

    # ---------------------------------------------------------------- params

    def _init(self, seed):
        rng = np.random.default_rng(seed)
        for st in self.stages:
            for layer in st.layers:
                if isinstance(layer, Conv2d):
                    layer.he_init(rng)
        if self.context is not None:
            self.context.init(rng)
        for step in self.refinements:
            step.init(rng)
        self.classifier.he_init(rng)

    def params(self):
        out = []
        for st in self.stages:
            out += st.params()
        if self.context is not None:
            out += self.context.params()
        for step in self.refinements:
            out += step.params()
        out += self.classifier.params()
        return out

    def buffers(self):
        out = {}
        for st in self.stages:
            out.update(st.buffers())
        return out

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def num_params(self):
        return sum(p.value.size for p in self.params())

    # --------------------------------------------------------------- forward

    def check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected input [N, {self.cfg.in_channels}, H, W], got {x.shape}")
        s = self.cfg.stride
        if x.shape[2] % s or x.shape[3] % s:
            raise ShapeError(f"input size {x.shape[2]}x{x.shape[3]} is not a multiple of the encoder stride {s}")

    def forward(self, x, train=False, seed=None):
        """Return logits [N, K, H, W] at the input resolution."""
        self.check_input(x)
        x = np.ascontiguousarray(x, dtype=self.dtype)
        rng = np.random.default_rng(seed) if train else None
        taps = {}
        h = x
        for st in self.stages:
            for layer in st.layers:
                h = layer.forward(h, train)
            taps[st.index] = h
            if st.pool is not None:
                h = st.pool.forward(h)
        if self.context is not None:
            h = self.context.forward(h, train)
        for i, (tap, step) in enumerate(zip(self.cfg.refine_taps, self.refinements)):
            f = taps[tap]
            if i + 1 < len(self.refinements):
                target = taps[self.cfg.refine_taps[i + 1]].shape[2:]
            else:
                target = f.shape[2:]
            h = step.forward(h, f, target, train)
        h = self.dropout.forward(h, train, rng)
        h = self.classifier.forward(h, train)
        return self.final_resize.forward(h, x.shape[2:])

    def backward(self, grad):
        """Backpropagate d(loss)/d(logits); parameter grads accumulate."""
        g = self.final_resize.backward(grad)
        g = self.dropout.backward(self.classifier.backward(g))
        tap_grads = {}
        for tap, step in reversed(list(zip(self.cfg.refine_taps, self.refinements))):
            g, df = step.backward(g)
            tap_grads[tap] = tap_grads[tap] + df if tap in tap_grads else df
        if self.context is not None:
            g = self.context.backward(g)
        for st in reversed(self.stages):
            if st.pool is not None:
                g = st.pool.backward(g)
            if st.index in tap_grads:
                g = g + tap_grads[st.index]
            for layer in reversed(st.layers):
                g = layer.backward(g)
        return g

    def predict_proba(self, x):
        return softmax_channels(self.forward(x, train=False))

    def predict(self, x):
        """Per-pixel argmax class; ties go to the lowest class index."""
        single = x.ndim == 3
        if single:
            x = x[None]
        labels = np.argmax(self.predict_proba(x), axis=1).astype(np.int64)
        return labels[0] if single else labels


def build_model(cfg, seed=0):
    return ScasNet(cfg, seed)


def predict(model, image):
    return model.predict(image)


# ----------------------------------------------------------------- checkpoint


def save_checkpoint(model, path, epoch=0, loss_history=(), seed=None, optimizer_state=None, extra=None):
    """Write ``manifest.json`` plus one tensor blob per parameter/buffer."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, p in enumerate(model.params()):
        fname = f"params/{i:04d}.bin"
        save_tensor(path / fname, p.value)
        entries.append({"name": p.name, "shape": list(p.shape), "file": fname})
    buffers = []
    for i, (name, arr) in enumerate(sorted(model.buffers().items())):
        fname = f"params/buffer_{i:04d}.bin"
        save_tensor(path / fname, arr)
        buffers.append({"name": name, "shape": list(arr.shape), "file": fname})
    velocity = []
    if optimizer_state is not None:
        (path / "optim").mkdir(exist_ok=True)
        for i, v in enumerate(optimizer_state):
            fname = f"optim/{i:04d}.bin"
            save_tensor(path / fname, v)
            velocity.append(fname)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "init_seed": model.seed,
        "epoch": int(epoch),
        "loss_history": [float(v) for v in loss_history],
        "seed": seed,
        "params": entries,
        "buffers": buffers,
        "velocity": velocity,
    }
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    """Return ``(model, manifest, velocity_list_or_None)``."""
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mf}")
    manifest = json.loads(mf.read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    cfg = ModelConfig.from_dict(manifest["config"])
    model = ScasNet(cfg, manifest.get("init_seed", 0))
    params = model.params()
    if len(params) != len(manifest["params"]):
        raise ValueError("checkpoint parameter count does not match its config")
    for p, entry in zip(params, manifest["params"]):
        if entry["name"] != p.name or tuple(entry["shape"]) != p.shape:
            raise ValueError(f"checkpoint entry {entry['name']} does not match parameter {p.name}")
        p.value[...] = load_tensor(path / entry["file"])
    bufs = model.buffers()
    for entry in manifest["buffers"]:
        bufs[entry["name"]][...] = load_tensor(path / entry["file"])
    velocity = [load_tensor(path / f).astype(model.dtype) for f in manifest.get("velocity", [])] or None
    return model, manifest, velocity
