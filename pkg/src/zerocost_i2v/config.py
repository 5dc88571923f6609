"""One JSON document describing a run: model, offset plan, adapters, training, data."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .adaptation import AdapterSpec
from .data import SyntheticVideoSpec
from .errors import ConfigError
from .stdha import HeadOffsetPlan, default_plan
from .training import TrainConfig
from .vit import PRESETS, ViTConfig

TOP_LEVEL = ("model", "plan", "adapter", "train", "data", "precision")
PRECISIONS = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class DataConfig:
    spec: SyntheticVideoSpec
    test_size: int = 500

    def to_dict(self) -> dict:
        return {**self.spec.to_dict(), "test_size": self.test_size}


@dataclass(frozen=True)
class RunConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    plan: HeadOffsetPlan | None = None
    adapter: AdapterSpec | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig | None = None
    precision: str = "f32"

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.plan is not None:
            self.plan.validate(self.model)
        if self.adapter is not None:
            self.adapter.validate(self.model)
        if self.data is not None:
            spec = self.data.spec
            if (spec.frames, spec.image_size) != (self.model.frames, self.model.image_size):
                raise ConfigError(
                    f"data ({spec.frames} frames, {spec.image_size}px) does not match the model "
                    f"({self.model.frames} frames, {self.model.image_size}px)")
            if self.model.channels != 1 or self.model.num_classes != spec.num_classes:
                raise ConfigError("synthetic data is single-channel with two classes")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def data_config(self) -> DataConfig:
        if self.data is not None:
            return self.data
        return DataConfig(SyntheticVideoSpec(frames=self.model.frames,
                                             image_size=self.model.image_size))

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "plan": None if self.plan is None else list(self.plan.offsets),
            "adapter": None if self.adapter is None else self.adapter.to_dict(),
            "train": self.train.to_dict(),
            "data": None if self.data is None else self.data.to_dict(),
            "precision": self.precision,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _section(doc: Mapping, key: str) -> dict:
    value = doc.get(key) or {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"section {key!r} must be a JSON object")
    return dict(value)


def parse_model(section: Mapping[str, Any]) -> ViTConfig:
    """Model fields, optionally on top of ``"preset": "vit-b16"``."""
    section = dict(section)
    preset = section.pop("preset", None)
    if preset is None:
        return ViTConfig.from_dict(section)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[preset].to_dict()
    unknown = set(section) - set(base)
    if unknown:
        raise ConfigError(f"unknown model keys: {sorted(unknown)}")
    if "width" in section and "mlp_width" not in section:
        base["mlp_width"] = None
    return ViTConfig(**{**base, **section})


def parse_config(doc: Mapping[str, Any]) -> RunConfig:
    """Validate a config document; unknown keys at any level are rejected."""
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model = parse_model(_section(doc, "model"))
    plan = doc.get("plan")
    if plan == "default":
        plan = default_plan(model.heads, model.frames)
    elif plan is not None:
        plan = HeadOffsetPlan.parse(plan, model.heads)
    adapter = doc.get("adapter")
    if adapter is not None:
        adapter = AdapterSpec.from_dict(_section(doc, "adapter"))
    train = TrainConfig.from_dict(_section(doc, "train"))
    data = None
    if doc.get("data") is not None:
        section = _section(doc, "data")
        test_size = section.pop("test_size", 500)
        if not isinstance(test_size, int) or test_size < 0:
            raise ConfigError("data.test_size must be a non-negative integer")
        section.setdefault("frames", model.frames)
        section.setdefault("image_size", model.image_size)
        data = DataConfig(SyntheticVideoSpec.from_dict(section), test_size)
    return RunConfig(model, plan, adapter, train, data, doc.get("precision", "f32"))


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(doc)
