"""Run configuration: one JSON document with a section per module.

Two named profiles ship with the package. ``desk`` is the tested default and
trains in minutes on one core; ``paper`` records the full-scale settings
(VGG-16 sized encoder, 400 px patches) and is documentary only.
"""
import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from scasnet.data import DataConfig
from scasnet.infer import InferConfig
from scasnet.model import ConfigError, ModelConfig, StageConfig, _from_dict
from scasnet.train import TrainConfig

PROFILES = ("desk", "paper")


@dataclass
class EvalConfig:
    radius: int = 3
    pr_thresholds: int = 101
    split: str = "test"

    @classmethod
    def from_dict(cls, data, where="eval"):
        return _from_dict(cls, data, where)

    def to_dict(self):
        return asdict(self)

    def validate(self):
        if self.radius < 0:
            raise ConfigError("eval.radius must be >= 0")
        if self.pr_thresholds < 2:
            raise ConfigError("eval.pr_thresholds must be >= 2")
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"eval.split must be train, val or test, got {self.split!r}")
        return self


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "infer": InferConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(data) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s) {', '.join(unknown)}")
        return cls(**{k: _SECTIONS[k].from_dict(v) for k, v in data.items()})

    def to_dict(self):
        return {k: getattr(self, k).to_dict() for k in _SECTIONS}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def validate(self):
        for k in _SECTIONS:
            getattr(self, k).validate()
        m, d, i = self.model, self.data, self.infer
        if d.patch_size % m.stride:
            raise ConfigError(f"data.patch_size {d.patch_size} is not a multiple of the model stride {m.stride}")
        if i.patch_size % m.stride:
            raise ConfigError(f"infer.patch_size {i.patch_size} is not a multiple of the model stride {m.stride}")
        if m.num_classes != 5:
            raise ConfigError("model.num_classes must match the 5 synthetic scene classes")
        return self

    def with_seed(self, seed):
        cfg = copy.deepcopy(self)
        cfg.train.seed = seed
        cfg.data.seed = seed
        return cfg


def desk_profile():
    """64 px patches, stride-8 four-stage encoder, rates [4, 3, 2, 1], 300 short epochs."""
    return RunConfig(
        model=ModelConfig(dtype="float32"),
        # an epoch here is 8 batches of 4, not a full pass over the 3456 patches
        train=TrainConfig(lr0=0.01, lr_drop_every=200, epochs=300, steps_per_epoch=8, batch_size=4),
        infer=InferConfig(scales=[0.5, 1.0, 1.5], patch_size=64),
        data=DataConfig(),
        eval=EvalConfig(),
    )


def paper_profile():
    vgg = [(2, 64, True), (2, 128, True), (3, 256, True), (3, 512, False), (3, 512, False)]
    return RunConfig(
        model=ModelConfig(
            stages=[StageConfig(*s) for s in vgg],
            dilation_rates=[24, 18, 12, 6],
            context_width=512,
            refine_taps=[3, 2, 1],
            refine_width=256,
            dtype="float32",
        ),
        train=TrainConfig(lr0=0.01, lr_drop_every=20, epochs=80, batch_size=4),
        infer=InferConfig(scales=[0.5, 1.0, 1.5], patch_size=400),
        data=DataConfig(scene_size=800, patch_size=400, overlap=100),
        eval=EvalConfig(),
    )


def profile(name):
    if name == "desk":
        return desk_profile()
    if name == "paper":
        return paper_profile()
    raise ConfigError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}")


def _merge(base, override, where):
    out = dict(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"{where}: unknown key {k}")
        out[k] = v
    return out


def load_config(path=None, profile_name="desk"):
    """Profile defaults overlaid with the sections given in ``path``.

    Keys are checked against the profile so a typo fails before any compute.
    """
    base = profile(profile_name).to_dict()
    if path is not None:
        try:
            override = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(override, dict):
            raise ConfigError(f"{path}: run config must be a JSON object")
        for section, values in override.items():
            if section not in base:
                raise ConfigError(f"unknown config section {section}")
            if not isinstance(values, dict):
                raise ConfigError(f"{section}: expected an object")
            base[section] = _merge(base[section], values, section)
    return RunConfig.from_dict(base).validate()
