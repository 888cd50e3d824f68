"""Experiment configuration: serializable, hashable, human-editable JSON.

A config document fully determines a run (together with the code version).
Checkpoint references are stored relative to the results root so hashes stay
stable when a results tree is moved.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .. import __version__ as CODE_VERSION
from ..detector import DetectorConfig
from ..kd import KDRecipe
from ..tensor import ConfigurationError

CONFIG_VERSION = 1


@dataclass(frozen=True)
class CorpusSpec:
    n_scenes: int
    base_seed: int
    extent: float = 60.0


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 3e-3
    weight_decay: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class EvalSpec:
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    max_dets: int = 64


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    student: DetectorConfig
    train_corpus: CorpusSpec = CorpusSpec(n_scenes=24, base_seed=100)
    eval_corpus: CorpusSpec = CorpusSpec(n_scenes=12, base_seed=500)
    teacher: DetectorConfig | None = None
    teacher_checkpoint: str | None = None  # relative to the results root
    recipe: KDRecipe = field(default_factory=KDRecipe)
    train: TrainSpec = TrainSpec()
    eval: EvalSpec = EvalSpec()
    version: int = CONFIG_VERSION

    def validate(self):
        self.student.validate()
        self.recipe.validate()
        if self.teacher is not None:
            self.teacher.validate()
        if self.recipe.needs_teacher and self.teacher is None:
            raise ConfigurationError(f"recipe of {self.name!r} needs a teacher but none is configured")
        if self.version != CONFIG_VERSION:
            raise ConfigurationError(f"unsupported config version {self.version}")
        return self


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def from_dict(doc):
    doc = dict(doc)
    for key, cls in (("student", DetectorConfig), ("teacher", DetectorConfig)):
        if doc.get(key) is not None:
            doc[key] = DetectorConfig(**doc[key])
    for key, cls in (
        ("train_corpus", CorpusSpec),
        ("eval_corpus", CorpusSpec),
        ("recipe", KDRecipe),
        ("train", TrainSpec),
        ("eval", EvalSpec),
    ):
        if doc.get(key) is not None and not isinstance(doc[key], cls):
            doc[key] = cls(**doc[key])
    return ExperimentConfig(**doc).validate()


def save_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path):
    with open(path) as fh:
        return from_dict(json.load(fh))


def config_hash(cfg):
    """Stable digest of the semantic config fields (run identity)."""
    doc = to_dict(cfg)
    doc.pop("name", None)  # cosmetic
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def apply_overrides(cfg, overrides):
    """Apply dotted ``key=value`` strings (e.g. train.lr=0.001) to a config."""
    doc = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigurationError(f"unknown config section {part!r} in override {item!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"unknown config field {key!r}")
        node[parts[-1]] = value
    return from_dict(doc)
