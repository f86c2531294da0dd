"""Codec configuration with JSON round-tripping."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ValidationError
from .models import PRESETS, AutoencoderConfig, InterpolatorConfig
from .tracking import TrackingConfig
from .training import LossWeights, TrainingPlan

WIDTHS = (16, 24, 32)


@dataclass(frozen=True)
class CodecConfig:
    resolution: int = 64
    group_size: int = 4
    width: int = 16
    seed: int = 0
    refine_iterations: int = 0
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    training: TrainingPlan = field(default_factory=TrainingPlan)

    def __post_init__(self):
        if self.resolution not in PRESETS:
            raise ValidationError(f"resolution must be one of {sorted(PRESETS)}, got {self.resolution}")
        if self.width not in WIDTHS:
            raise ValidationError(f"transformer width must be one of {WIDTHS}, got {self.width}")
        if self.group_size < 2:
            raise ValidationError(f"group size must be >= 2, got {self.group_size}")
        if self.refine_iterations < 0:
            raise ValidationError("refine_iterations must be >= 0")

    @property
    def plan(self) -> TrainingPlan:
        return replace(self.training, group_size=self.group_size, seed=self.seed)

    @property
    def tracking_config(self) -> TrackingConfig:
        return replace(self.tracking, seed=self.seed)

    def autoencoder(self) -> AutoencoderConfig:
        return AutoencoderConfig.for_resolution(self.resolution)

    def interpolator(self) -> InterpolatorConfig:
        ae = self.autoencoder()
        return InterpolatorConfig(feature_res=ae.feature_res, feature_dim=ae.feature_dim, width=self.width)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_dict(cls, data: dict) -> "CodecConfig":
        """Build from a plain dict; keys starting with ``_`` are annotations and ignored."""
        data = _strip_notes(data)
        nested = {"tracking": TrackingConfig, "loss": LossWeights, "training": TrainingPlan}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for key, value in data.items():
            if key in nested:
                sub = nested[key]
                sub_known = {f.name for f in fields(sub)}
                value = _strip_notes(value)
                bad = set(value) - sub_known
                if bad:
                    raise ValidationError(f"unknown keys in '{key}': {sorted(bad)}")
                kw[key] = sub(**value)
            else:
                kw[key] = value
        return cls(**kw)

    @classmethod
    def from_json(cls, path) -> "CodecConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def with_overrides(self, **kw) -> "CodecConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def _strip_notes(d: dict) -> dict:
    if not isinstance(d, dict):
        raise ValidationError(f"expected a JSON object, got {type(d).__name__}")
    return {k: v for k, v in d.items() if not k.startswith("_")}


def desk_config(**kw) -> CodecConfig:
    """Small training budget suitable for CPU smoke runs."""
    training = TrainingPlan(stage_a_steps=400, stage_b_steps=200, finetune_steps=50, batch_size=1)
    return replace(CodecConfig(training=training, tracking=TrackingConfig(p=500)), **kw)
