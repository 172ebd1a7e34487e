"""Configuration dataclasses and their JSON round trip.

Every tunable that the modules rely on appears here with an explicit key,
so an experiment is reproducible from the config file alone. Loading fills
omitted keys with defaults; saving always writes the complete set.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ShapeError, StorageError

CONFIG_VERSION = 1

KEYFRAME_SCALES = (1.0, 0.75, 0.6, 0.5)
PROPAGATION_MODES = ("guided", "warp_only")
SEGMENTERS = ("oracle", "toy")
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class OptimizerConfig:
    momentum: float = 0.9
    base_lr: float = 0.002
    decay_factor: float = 0.992
    decay_every: int = 100
    weight_decay: float = 0.0005
    batch_size: int = 8


@dataclass(frozen=True)
class TrainConfig:
    intervals: tuple[int, ...] = (1, 2, 3, 4, 5)
    crop_fraction: float = 0.75
    iterations: int = 2000
    seed: int = 7


@dataclass(frozen=True)
class SyntheticConfig:
    height: int = 96
    width: int = 96
    class_count: int = 4
    shape_count_min: int = 4
    shape_count_max: int = 6
    speed_min: float = 2.0
    speed_max: float = 4.0
    size_min: int = 16
    size_max: int = 30
    frames_per_scene: int = 8
    # error model of the stand-in keyframe segmenter used during training:
    # boundary cells flip to a neighboring class at flip_rate, blob_count
    # random rectangles (up to blob_size cells per side) take a random
    # class, and the served probabilities put `confidence` on the result
    oracle_flip_rate: float = 0.4
    oracle_confidence: float = 0.8
    oracle_blob_count: int = 3
    oracle_blob_size: int = 4


@dataclass(frozen=True)
class PipelineConfig:
    class_count: int = 4
    frame_height: int = 96
    frame_width: int = 96
    keyframe_interval: int = 5
    keyframe_scale: float = 1.0
    flow_input_scale: float = 0.5
    kernel_size: int = 3
    kernel_subset: tuple[tuple[int, int], ...] | None = None
    kernel_learnable: bool = False
    flow_width: int = 32
    intra_width: int = 32
    guide_width: int = 32
    toy_width: int = 192
    segmenter: str = "oracle"
    propagation: str = "guided"
    guidance_override: str | None = None
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.keyframe_interval < 1:
            raise ShapeError(f"keyframe_interval must be >= 1, got {self.keyframe_interval}")
        if self.keyframe_scale not in KEYFRAME_SCALES:
            raise ShapeError(
                f"keyframe_scale must be one of {KEYFRAME_SCALES}, got {self.keyframe_scale}")
        h, w = self.frame_height, self.frame_width
        if h % 8 or w % 8:
            raise ShapeError(f"frame dims must be divisible by 8, got {(h, w)}")
        kh, kw = self.keyframe_scale * h, self.keyframe_scale * w
        if kh != int(kh) or kw != int(kw) or int(kh) % 8 or int(kw) % 8:
            raise ShapeError(
                f"keyframe_scale {self.keyframe_scale} applied to {(h, w)} must give "
                f"integer dims divisible by 8, got {(kh, kw)}")
        if not 0 < self.flow_input_scale <= 1:
            raise ShapeError(f"flow_input_scale must be in (0, 1], got {self.flow_input_scale}")
        fh, fw = self.flow_input_scale * h, self.flow_input_scale * w
        if fh != int(fh) or fw != int(fw) or int(fh) % 4 or int(fw) % 4:
            raise ShapeError(
                f"flow_input_scale {self.flow_input_scale} applied to {(h, w)} must give "
                f"integer dims divisible by 4, got {(fh, fw)}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ShapeError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.class_count < 2:
            raise ShapeError(f"class_count must be >= 2, got {self.class_count}")
        if self.propagation not in PROPAGATION_MODES:
            raise ShapeError(f"propagation must be one of {PROPAGATION_MODES}")
        if self.guidance_override not in (None, "identity"):
            raise ShapeError(f"guidance_override must be None or 'identity'")
        if self.segmenter not in SEGMENTERS:
            raise ShapeError(f"segmenter must be one of {SEGMENTERS}")
        if self.dtype not in DTYPES:
            raise ShapeError(f"dtype must be one of {tuple(DTYPES)}")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    @property
    def frame_hw(self) -> tuple[int, int]:
        return (self.frame_height, self.frame_width)

    @property
    def eighth_hw(self) -> tuple[int, int]:
        return (self.frame_height // 8, self.frame_width // 8)

    @property
    def flow_input_hw(self) -> tuple[int, int]:
        return (int(self.frame_height * self.flow_input_scale),
                int(self.frame_width * self.flow_input_scale))

    @property
    def keyframe_hw(self) -> tuple[int, int]:
        return (int(self.frame_height * self.keyframe_scale),
                int(self.frame_width * self.keyframe_scale))


@dataclass(frozen=True)
class FullConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


def _dataclass_from_dict(cls, data: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise StorageError(f"unknown {where} config keys: {sorted(unknown)}")
    kwargs = dict(data)
    if cls is PipelineConfig and kwargs.get("kernel_subset") is not None:
        kwargs["kernel_subset"] = tuple((int(a), int(b)) for a, b in kwargs["kernel_subset"])
    if cls is TrainConfig and "intervals" in kwargs:
        kwargs["intervals"] = tuple(int(i) for i in kwargs["intervals"])
    return cls(**kwargs)


def config_to_dict(cfg: FullConfig) -> dict:
    out = {"version": CONFIG_VERSION}
    for section in ("pipeline", "optimizer", "train", "synthetic"):
        out[section] = asdict(getattr(cfg, section))
    return out


def config_from_dict(data: dict) -> FullConfig:
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise StorageError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
    return FullConfig(
        pipeline=_dataclass_from_dict(PipelineConfig, data.get("pipeline", {}), "pipeline"),
        optimizer=_dataclass_from_dict(OptimizerConfig, data.get("optimizer", {}), "optimizer"),
        train=_dataclass_from_dict(TrainConfig, data.get("train", {}), "train"),
        synthetic=_dataclass_from_dict(SyntheticConfig, data.get("synthetic", {}), "synthetic"))


def load_config(path) -> FullConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise StorageError(f"config {path} is not valid JSON: {e}") from e
    return config_from_dict(data)


def save_config(cfg: FullConfig, path):
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")


def with_pipeline(cfg: FullConfig, **overrides) -> FullConfig:
    return replace(cfg, pipeline=replace(cfg.pipeline, **overrides))
