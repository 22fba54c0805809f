"""Run configuration: YAML file -> nested dataclasses."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .errors import ConfigError, InvalidConfigError
from .matching import LossWeights
from .model import VARIANT_DECODER_LAYERS


@dataclass
class ModelSection:
    d_v: int = 256
    n_q: int = 64
    heads: int = 8
    ffn_dim: int = 1024
    stride: int = 8
    encoder_layers: int = 2
    decoder_layers: Optional[int] = None
    variant: str = "s"
    dropout: float = 0.0
    aux_loss: bool = False
    label_space: str = "verb"


@dataclass
class TrainSection:
    lr: float = 1e-4
    backbone_lr_mult: float = 0.1
    weight_decay: float = 1e-4
    steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    grad_clip: float = 0.1
    box_weight: float = 2.5
    giou_weight: float = 1.0
    cls_weight: float = 1.0
    mimic_weight: float = 20.0
    log_every: int = 1
    checkpoint_every: int = 500
    out_dir: str = "runs/default"

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.box_weight, self.giou_weight, self.cls_weight, self.mimic_weight)


@dataclass
class ProviderSection:
    kind: str = "mock"  # mock | cache | remote
    seed: int = 0
    endpoint: Optional[str] = None
    cache_path: Optional[str] = None
    timeout: float = 30.0
    retries: int = 3


@dataclass
class DataSection:
    train: Optional[str] = None
    test: Optional[str] = None
    registry: Optional[str] = None
    split: Optional[str] = None


@dataclass
class EvalSection:
    setting: str = "default"
    scenario: int = 1
    top_k: int = 100
    out_dir: Optional[str] = None


@dataclass
class KnowledgeSection:
    backend: str = "fixture"  # fixture | http
    fixture_dir: Optional[str] = None
    endpoint: Optional[str] = None
    cache: Optional[str] = None
    word_limit: int = 50
    text_mode: str = "phrase"  # phrase | description
    encoder_seed: int = 0
    timeout: float = 30.0
    retries: int = 3


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    provider: ProviderSection = field(default_factory=ProviderSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    knowledge: KnowledgeSection = field(default_factory=KnowledgeSection)
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        m = self.model
        if m.variant not in VARIANT_DECODER_LAYERS:
            raise InvalidConfigError(f"model.variant must be one of {sorted(VARIANT_DECODER_LAYERS)}")
        if m.variant == "l" and m.decoder_layers not in (None, 6):
            raise InvalidConfigError("model.variant 'l' uses 6 decoder layers")
        if self.provider.kind not in ("mock", "cache", "remote"):
            raise InvalidConfigError(f"provider.kind must be mock, cache or remote, not {self.provider.kind!r}")
        if self.provider.kind == "remote" and not self.provider.endpoint:
            raise InvalidConfigError("provider.endpoint is required for a remote provider")
        if self.provider.kind == "cache" and not self.provider.cache_path:
            raise InvalidConfigError("provider.cache_path is required for a cache provider")
        if self.train.batch_size <= 0 or self.train.steps < 0:
            raise InvalidConfigError("train.batch_size must be positive and train.steps nonnegative")
        if self.eval.setting not in ("default", "known_objects"):
            raise InvalidConfigError(f"eval.setting must be default or known_objects, not {self.eval.setting!r}")
        if self.knowledge.text_mode not in ("phrase", "description"):
            raise InvalidConfigError("knowledge.text_mode must be phrase or description")

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        """Paths in the file are relative to the file's directory."""
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        """Hash of the sections that determine the training trajectory."""
        d = self.to_dict()
        train = dict(d["train"])
        for k in ("steps", "log_every", "checkpoint_every", "out_dir"):
            train.pop(k)
        payload = {"model": d["model"], "train": train, "provider": d["provider"]}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


_SECTION_TYPES = {
    "model": ModelSection,
    "train": TrainSection,
    "provider": ProviderSection,
    "data": DataSection,
    "eval": EvalSection,
    "knowledge": KnowledgeSection,
}


def _build_section(name: str, cls, doc: Any):
    if doc is None:
        return cls()
    if not isinstance(doc, Mapping):
        raise InvalidConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise InvalidConfigError(f"unknown keys in {name!r}: {unknown}")
    return cls(**doc)


def config_from_dict(doc: Mapping, base_dir=".") -> RunConfig:
    if not isinstance(doc, Mapping):
        raise InvalidConfigError("config must be a mapping of sections")
    unknown = sorted(set(doc) - set(_SECTION_TYPES))
    if unknown:
        raise InvalidConfigError(f"unknown config sections: {unknown}")
    try:
        sections = {name: _build_section(name, cls, doc.get(name)) for name, cls in _SECTION_TYPES.items()}
    except TypeError as exc:
        raise InvalidConfigError(str(exc)) from exc
    return RunConfig(**sections, base_dir=str(base_dir))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise InvalidConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(doc, base_dir=path.parent)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
