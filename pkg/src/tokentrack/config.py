"""Flat ``key = value`` run configuration with namespaced keys.

Every tunable lives in one table below with its default and a one-line
description. Files may set any subset; unknown keys are rejected. Values are
written with ``repr`` so a written config reads back to identical values.
"""

from __future__ import annotations

import os
from pathlib import Path

from .backbone import BackboneConfig
from .model import ModelConfig
from .temporal import VARIANTS
from .train import OptimConfig, TrainConfig
from .world import SamplerConfig, WorldSpec


class ConfigKeyError(KeyError):
    pass


# key, default, description
FIELDS: list[tuple[str, object, str]] = [
    ("seed", 0, "model init, batch sampling and generated-data seed"),
    ("variant", "mamba-cross", "temporal wiring: " + " | ".join(VARIANTS)),

    ("backbone.template_size", 64, "template crop side in pixels (multiple of 16)"),
    ("backbone.search_size", 128, "search crop side in pixels (multiple of 16)"),
    ("backbone.embed_dim", 64, "token width D"),
    ("backbone.depth", 4, "number of joint-attention blocks"),
    ("backbone.num_heads", 4, "attention heads per block"),
    ("backbone.mlp_ratio", 4.0, "MLP hidden width as a multiple of D"),

    ("temporal.enabled", True, "run the temporal module on the track-token window"),
    ("temporal.track_token", True, "prepend a track token to the backbone input"),
    ("temporal.window", 8, "sliding window length m (frames per training clip)"),
    ("temporal.num_heads", 4, "heads of the temporal attention layers"),
    ("temporal.mlp_ratio", 4.0, "MLP width of the temporal attention layers"),
    ("temporal.ssm_state", 16, "state size N of the scan layer"),
    ("temporal.ssm_expand", 2, "inner width of the scan layer as a multiple of D"),
    ("temporal.ssm_conv", 4, "causal convolution width of the scan layer"),

    ("head.hidden", 32, "channels of the 3x3 convolutions in each head branch"),

    ("loss.giou_weight", 2.0, "weight of the GIoU term"),
    ("loss.l1_weight", 5.0, "weight of the L1 term"),

    ("world.frame_size", 160, "square frame side in pixels"),
    ("world.num_frames", 120, "frames per sequence"),
    ("world.num_sequences", 300, "sequences written by gen-data / generated for training"),
    ("world.target_size", (14.0, 22.0), "target base size range in pixels"),
    ("world.hue_drift", 0.003, "max per-frame hue drift of the target"),
    ("world.scale_drift", 0.01, "per-frame log-scale random-walk step"),
    ("world.speed", (0.5, 2.0), "initial speed range in pixels per frame"),
    ("world.accel_sd", 0.12, "per-frame acceleration noise"),
    ("world.max_speed", 3.0, "speed cap outside bursts"),
    ("world.burst_prob", 0.01, "per-frame probability of a fast-motion burst"),
    ("world.burst_speed", 6.0, "speed during bursts"),
    ("world.num_distractors", 2, "same-shape objects with a nearby hue"),
    ("world.distractor_hue", 0.06, "max hue offset of distractors"),
    ("world.num_occlusions", (1, 2), "range of full occlusions per sequence"),
    ("world.occlusion_length", (10, 20), "occlusion length range in frames"),
    ("world.clutter", 6, "static background blobs"),
    ("world.noise_sd", 0.03, "static background noise"),

    ("train.epochs", 10, "training epochs"),
    ("train.pairs_per_epoch", 2000, "image pairs per epoch"),
    ("train.clips_per_unit", 4, "clips n per batch unit (n * window pairs per step)"),
    ("train.accumulate", 1, "batch units accumulated per optimizer step"),
    ("train.lr_backbone", 4e-4, "backbone learning rate"),
    ("train.lr_other", 4e-3, "learning rate of all other parameters"),
    ("train.weight_decay", 1e-4, "decoupled weight decay"),
    ("train.decay_fraction", 0.8, "learning rates drop at this fraction of the epochs"),
    ("train.decay_factor", 10.0, "learning-rate drop factor"),
    ("train.checkpoint_every", 5, "write a periodic checkpoint every k epochs (0: final only)"),
    ("train.template_factor", 2.0, "template crop side / sqrt(box area)"),
    ("train.search_factor", 4.0, "search crop side / sqrt(box area)"),
    ("train.center_jitter", 0.1, "search-center jitter as a fraction of the crop side"),
    ("train.scale_jitter", (0.8, 1.25), "search-scale jitter range"),
    ("train.brightness", 0.2, "brightness jitter amplitude"),
    ("train.flip_prob", 0.5, "probability of a horizontal clip flip"),

    ("eval.use_prior", True, "weight the score map by a Hamming window before argmax"),
    ("eval.window", 0, "inference window (0: the trained window; larger values are clamped)"),
    ("eval.num_sequences", 30, "sequences of the generated evaluation suite"),
    ("eval.suite_seed", 2000000, "seed offset of the generated evaluation suite"),
]

DEFAULTS = {k: v for k, v, _ in FIELDS}
DESCRIPTIONS = {k: d for k, _, d in FIELDS}


def _parse(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, tuple):
        parts = [p for p in text.strip("()").split(",") if p.strip()]
        if len(parts) != len(default):
            raise ValueError(f"{key}: expected {len(default)} values, got {text!r}")
        return tuple(type(d)(float(p) if isinstance(d, float) else int(p)) for d, p in zip(default, parts))
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, str):
        return value
    return repr(value)


class RunConfig:
    """Immutable mapping of every key in :data:`FIELDS` to its value."""

    def __init__(self, values: dict | None = None):
        merged = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigKeyError(f"unknown config key {k!r}")
            merged[k] = _parse(k, v) if isinstance(v, str) and not isinstance(DEFAULTS[k], str) else v
        if merged["variant"] not in VARIANTS:
            raise ValueError(f"unknown variant {merged['variant']!r}")
        self._values = merged

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ConfigKeyError(f"unknown config key {key!r}")
        return self._values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values

    def as_dict(self) -> dict:
        return dict(self._values)

    def replace(self, **overrides) -> "RunConfig":
        """Copy with overrides; dotted keys are passed with ``__`` for dots."""
        vals = dict(self._values)
        for k, v in overrides.items():
            vals[k.replace("__", ".")] = v
        return RunConfig(vals)

    def with_values(self, values: dict) -> "RunConfig":
        vals = dict(self._values)
        vals.update(values)
        return RunConfig(vals)

    # -- text form -------------------------------------------------------------
    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected 'key = value', got {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in DEFAULTS:
                raise ConfigKeyError(f"line {n}: unknown config key {k!r}")
            values[k] = _parse(k, v)
        return cls(values)

    def to_text(self, comments: bool = False) -> str:
        lines = []
        for k, _, desc in FIELDS:
            if comments:
                lines.append(f"# {desc}")
            lines.append(f"{k} = {_format(self._values[k])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path: os.PathLike) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path: os.PathLike) -> None:
        Path(path).write_text(self.to_text())

    # -- module configs ----------------------------------------------------------
    def backbone_config(self) -> BackboneConfig:
        v = self._values
        return BackboneConfig(v["backbone.template_size"], v["backbone.search_size"],
                              v["backbone.embed_dim"], v["backbone.depth"],
                              v["backbone.num_heads"], v["backbone.mlp_ratio"])

    def model_config(self) -> ModelConfig:
        v = self._values
        return ModelConfig(backbone=self.backbone_config(), variant=v["variant"],
                           window=v["temporal.window"], use_track_token=v["temporal.track_token"],
                           use_temporal=v["temporal.enabled"], head_hidden=v["head.hidden"],
                           temporal_heads=v["temporal.num_heads"],
                           temporal_mlp_ratio=v["temporal.mlp_ratio"], ssm_state=v["temporal.ssm_state"],
                           ssm_expand=v["temporal.ssm_expand"], ssm_conv=v["temporal.ssm_conv"])

    def optim_config(self) -> OptimConfig:
        v = self._values
        return OptimConfig(lr_backbone=v["train.lr_backbone"], lr_other=v["train.lr_other"],
                           weight_decay=v["train.weight_decay"], epochs=v["train.epochs"],
                           decay_fraction=v["train.decay_fraction"], decay_factor=v["train.decay_factor"])

    def train_config(self) -> TrainConfig:
        v = self._values
        return TrainConfig(clips_per_unit=v["train.clips_per_unit"],
                           pairs_per_epoch=v["train.pairs_per_epoch"], accumulate=v["train.accumulate"],
                           giou_weight=v["loss.giou_weight"], l1_weight=v["loss.l1_weight"])

    def sampler_config(self) -> SamplerConfig:
        v = self._values
        return SamplerConfig(template_size=v["backbone.template_size"], search_size=v["backbone.search_size"],
                             template_factor=v["train.template_factor"], search_factor=v["train.search_factor"],
                             center_jitter=v["train.center_jitter"], scale_jitter=v["train.scale_jitter"],
                             brightness=v["train.brightness"], flip_prob=v["train.flip_prob"])

    def world_spec(self) -> WorldSpec:
        v = self._values
        keys = ("frame_size", "num_frames", "target_size", "hue_drift", "scale_drift", "speed", "accel_sd",
                "max_speed", "burst_prob", "burst_speed", "num_distractors", "distractor_hue",
                "num_occlusions", "occlusion_length", "clutter", "noise_sd")
        return WorldSpec(**{k: v[f"world.{k}"] for k in keys})
