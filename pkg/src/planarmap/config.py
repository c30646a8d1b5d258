"""Pipeline configuration: one YAML document with a block per stage."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .diffusion import DiffusionParams
from .mapman import DriftFilter, MergeParams
from .normals import NormalParams
from .planefit import RansacParams
from .scenegen import NoiseSpec, StaircaseSpec
from .segmentation import SegmentationParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MatchParams:
    """Pairing rule between extracted planes and ground-truth faces."""

    angle_tol: float = 10.0
    distance_tol: float = 0.02
    min_truth_pixels: int = 300

    def __post_init__(self):
        if min(self.angle_tol, self.distance_tol) <= 0 or self.min_truth_pixels < 0:
            raise ValueError("match tolerances must be positive")


@dataclass(frozen=True)
class CameraParams:
    width: int = 640
    height: int = 480
    frames: int = 50
    drift_mm_per_frame: float = 0.0

    def __post_init__(self):
        if self.width < 3 or self.height < 3 or self.frames < 1:
            raise ValueError("camera size must be >= 3x3 and frames >= 1")


_BLOCKS = {
    "diffusion": DiffusionParams,
    "normals": NormalParams,
    "segmentation": SegmentationParams,
    "ransac": RansacParams,
    "merge": MergeParams,
    "drift": DriftFilter,
    "noise": NoiseSpec,
    "staircase": StaircaseSpec,
    "camera": CameraParams,
    "match": MatchParams,
}


@dataclass(frozen=True)
class PipelineConfig:
    diffusion: DiffusionParams = field(default_factory=DiffusionParams)
    # Geometric normals separate tread/riser creases far more sharply than
    # the gradient form at the default edge thresholds.
    normals: NormalParams = field(default_factory=lambda: NormalParams(mode="geometric"))
    segmentation: SegmentationParams = field(default_factory=SegmentationParams)
    ransac: RansacParams = field(default_factory=RansacParams)
    merge: MergeParams = field(default_factory=MergeParams)
    drift: DriftFilter = field(default_factory=DriftFilter)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    staircase: StaircaseSpec = field(default_factory=StaircaseSpec)
    camera: CameraParams = field(default_factory=CameraParams)
    match: MatchParams = field(default_factory=MatchParams)
    seed: int = 0
    workers: int | None = None

    def __post_init__(self):
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(self, seed=seed, ransac=dataclasses.replace(self.ransac, rng_seed=seed))

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
        return out

    @classmethod
    def from_dict(cls, data: dict | None) -> "PipelineConfig":
        data = dict(data or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = {}
        for name, value in data.items():
            if name in _BLOCKS:
                kw[name] = _build_block(name, _BLOCKS[name], value)
            else:
                kw[name] = value
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _build_block(name, typ, value):
    if value is None:
        return typ()
    if not isinstance(value, dict):
        raise ConfigError(f"config block {name!r} must be a mapping")
    fields = {f.name for f in dataclasses.fields(typ)}
    unknown = sorted(set(value) - fields)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {', '.join(unknown)}")
    try:
        return typ(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def dumps(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def loads(text: str) -> PipelineConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    return PipelineConfig.from_dict(data)


def load(path) -> PipelineConfig:
    return loads(Path(path).read_text())


def save(path, cfg: PipelineConfig) -> None:
    Path(path).write_text(dumps(cfg))
