"""Whole-run configuration: nested dataclasses, validation, file loading.

Config files are YAML (nested key/value); unknown keys are rejected.
Every checkpoint and metrics file embeds the full config verbatim as
sorted-key JSON so runs are self-describing.
"""

import dataclasses
import json
from dataclasses import dataclass, field, fields

import yaml

from .data import AugmentConfig
from .ema import PER_EPOCH, PER_ITERATION, EmaSchedule
from .errors import ConfigError
from .losses import LossWeights
from .masking import validate_masking
from .vit import ProjectionHeadConfig, ViTConfig

TEACHER_DUAL = "dual"
TEACHER_SINGLE = "single"


@dataclass
class MaskingConfig:
    ratio: float = 0.75
    num_folds: int = 3


@dataclass
class EmaConfig:
    start_momentum: float
    end_momentum: float
    frequency: str


@dataclass
class SinkhornConfig:
    n_iters: int = 3
    teacher_temperature: float = 0.05
    student_temperature: float = 0.1


@dataclass
class OptimConfig:
    lr: float = 1.5e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_epochs: int = 5
    total_epochs: int = 20
    batch_size: int = 128


@dataclass
class TrainConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    head: ProjectionHeadConfig = field(
        default_factory=lambda: ProjectionHeadConfig(hidden_dim=16))
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    ema_rec: EmaConfig = field(default_factory=lambda: EmaConfig(
        start_momentum=0.96, end_momentum=0.99, frequency=PER_EPOCH))
    ema_cl: EmaConfig = field(default_factory=lambda: EmaConfig(
        start_momentum=0.996, end_momentum=1.0, frequency=PER_ITERATION))
    teacher_mode: str = TEACHER_DUAL
    # single-teacher mode takes its schedule from ema_rec
    loss: LossWeights = field(default_factory=LossWeights)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    augmentation_mode: str = "dual"        # "dual" | "simple_only"
    multifold_pseudo_labeling: bool = True
    seed: int = 0
    log_every: int = 1

    # -- validation -------------------------------------------------------

    def validate(self):
        self.model.validate()
        n = self.model.num_patches
        validate_masking(n, self.masking.ratio, self.masking.num_folds)
        for name, ema in (("ema_rec", self.ema_rec), ("ema_cl", self.ema_cl)):
            if not 0.0 <= ema.start_momentum <= ema.end_momentum <= 1.0:
                raise ConfigError(f"{name}: momenta must satisfy "
                                  f"0 <= start <= end <= 1")
            if ema.frequency not in (PER_EPOCH, PER_ITERATION):
                raise ConfigError(f"{name}: unknown frequency '{ema.frequency}'")
        if self.teacher_mode not in (TEACHER_DUAL, TEACHER_SINGLE):
            raise ConfigError(f"unknown teacher_mode '{self.teacher_mode}'")
        if self.augmentation_mode not in ("dual", "simple_only"):
            raise ConfigError(
                f"unknown augmentation_mode '{self.augmentation_mode}'")
        for lam in (self.loss.lambda_m, self.loss.lambda_c, self.loss.lambda_p):
            if lam < 0:
                raise ConfigError("loss weights must be nonnegative")
        if self.sinkhorn.teacher_temperature <= 0 or \
                self.sinkhorn.student_temperature <= 0:
            raise ConfigError("temperatures must be positive")
        if self.sinkhorn.n_iters < 1:
            raise ConfigError("sinkhorn n_iters must be >= 1")
        if self.optim.total_epochs < 1 or self.optim.batch_size < 1:
            raise ConfigError("total_epochs and batch_size must be >= 1")
        if not 0 <= self.optim.warmup_epochs <= self.optim.total_epochs:
            raise ConfigError("warmup_epochs must be within total_epochs")
        if self.head.output_dim < 2:
            raise ConfigError("prototype count must be >= 2")
        return self

    # -- (de)serialization --------------------------------------------------

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d, path="")

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


def _build(dc_type, d, path):
    """Construct a dataclass from a nested dict, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ConfigError(f"expected a mapping at '{path or '.'}', got {type(d).__name__}")
    known = {f.name: f for f in fields(dc_type)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(
            f"unknown config key{'s' if len(unknown) > 1 else ''} at "
            f"'{path or '.'}': {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, val in d.items():
        f = known[name]
        sub = _nested_type(f)
        if sub is not None and isinstance(val, dict):
            kwargs[name] = _build(sub, val, f"{path}.{name}".lstrip("."))
        elif isinstance(val, list):
            kwargs[name] = tuple(val)
        else:
            kwargs[name] = val
    return dc_type(**kwargs)


def _nested_type(f):
    t = f.type if not isinstance(f.type, str) else None
    if t is None:
        # dataclass field types may be strings under __future__ annotations;
        # resolve by looking at the default factory instead
        if f.default_factory is not dataclasses.MISSING:  # type: ignore
            probe = f.default_factory()
            if dataclasses.is_dataclass(probe):
                return type(probe)
        return None
    return t if dataclasses.is_dataclass(t) else None


def load_config(path=None, overrides=None):
    """Build a validated TrainConfig from an optional YAML file plus
    dotted-key overrides like {'loss.lambda_c': 0}."""
    base = TrainConfig().to_dict()
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        _merge(base, loaded, "")
    for key, val in (overrides or {}).items():
        _apply_override(base, key, val)
    cfg = TrainConfig.from_dict(base)
    cfg.validate()
    return cfg


def _merge(base, incoming, path):
    if not isinstance(incoming, dict):
        raise ConfigError(f"expected a mapping at '{path or '.'}'")
    for key, val in incoming.items():
        if key not in base:
            raise ConfigError(f"unknown config key at '{path or '.'}': {key}")
        if isinstance(base[key], dict):
            _merge(base[key], val, f"{path}.{key}".lstrip("."))
        else:
            base[key] = val


def _apply_override(base, dotted, val):
    parts = dotted.split(".")
    node = base
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    if isinstance(val, str):
        val = yaml.safe_load(val)
    node[parts[-1]] = val
