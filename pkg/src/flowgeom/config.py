"""Declarative experiment configuration, parsed from JSON with strict
unknown-key rejection, plus canonical hashing for compatibility checks."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .losses import LossWeights, VARIANTS as LOSS_VARIANTS
from .model import ModelConfig
from .synth import GenConfig, TeacherNoise

VARIANT_NAMES = ("3d-sup", "flow-projective", "flow-tracking", "flow-factored")
VARIANT_FLOW_HEAD = {
    "3d-sup": "none",
    "flow-projective": "projective",
    "flow-tracking": "tracking",
    "flow-factored": "factored",
}


class ConfigError(ValueError):
    pass


def _build(cls, data: dict, path: str, nested: dict | None = None):
    """Instantiate a dataclass from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    nested = nested or {}
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in nested:
            sub_cls, sub_nested = nested[key]
            kwargs[key] = _build(sub_cls, value, f"{path}.{key}", sub_nested)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class DataSpec:
    n_labeled: int = 8
    n_unlabeled: int = 24
    n_eval: int = 16
    gen: GenConfig = field(default_factory=GenConfig)

    def validate(self):
        if min(self.n_labeled, self.n_unlabeled, self.n_eval) < 0:
            raise ConfigError("sequence counts must be >= 0")
        self.gen.validate()


@dataclass
class OptimConfig:
    kind: str = "adam"            # 'adam' or 'sgdm'; both keep momentum accumulators
    lr: float = 3e-4
    momentum: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    warmup_steps: int = 0

    def validate(self):
        if self.kind not in ("adam", "sgdm"):
            raise ConfigError(f"optimizer kind {self.kind!r} not supported")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ConfigError("lr and clip_norm must be positive")


@dataclass
class TrainConfig:
    head_only_steps: int = 0      # stage 1: backbone frozen, flow head only
    main_steps: int = 1500        # stage 2: end-to-end
    labeled_per_step: int = 1
    unlabeled_per_step: int = 1
    flow_pairs_per_step: int = 2
    flow_on_labeled: bool = False
    eval_every: int = 500
    checkpoint_every: int = 1000
    eval_max_points: int = 1024   # per-view point-cloud subsample for metrics
    use_labeled: int | None = None    # cap on labeled sequences consumed
    use_unlabeled: int | None = None

    def validate(self):
        if self.head_only_steps < 0 or self.main_steps < 0:
            raise ConfigError("stage step counts must be >= 0")
        if self.labeled_per_step < 1:
            raise ConfigError("labeled_per_step must be >= 1")
        if self.flow_pairs_per_step < 1:
            raise ConfigError("flow_pairs_per_step must be >= 1")


@dataclass
class ExperimentConfig:
    variant: str = "flow-factored"
    loss_variant: str = "pi3"
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs/run0"
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        if self.variant not in VARIANT_NAMES:
            raise ConfigError(f"variant must be one of {VARIANT_NAMES}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(f"loss_variant must be one of {LOSS_VARIANTS}")
        self.data.validate()
        try:
            self.model.validate()
            self.loss.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.optim.validate()
        self.train.validate()
        if self.model.image_size != self.data.gen.height or \
                self.data.gen.height != self.data.gen.width:
            raise ConfigError("model image_size must match square gen height/width")

    def flow_head_kind(self) -> str:
        return VARIANT_FLOW_HEAD[self.variant]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_NESTED = {
    "data": (DataSpec, {"gen": (GenConfig, {"teacher": (TeacherNoise, {})})}),
    "model": (ModelConfig, {}),
    "loss": (LossWeights, {}),
    "optim": (OptimConfig, {}),
    "train": (TrainConfig, {}),
}


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "config", _NESTED)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode()).hexdigest()[:16]


def gen_hash(data: DataSpec, seed: int) -> str:
    payload = {"data": dataclasses.asdict(data), "seed": seed}
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:16]
