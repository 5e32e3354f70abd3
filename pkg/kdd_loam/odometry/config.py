from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from enum import Enum
from typing import Any

from kdd_loam.errors import (
    ConfigError,
    InvalidConfigValue,
    IoFailure,
    MissingConfigKey,
    UnknownConfigKey,
)
from kdd_loam.matching import MatchMode

COMMENT = "#"
SEPARATOR = "="


class FeatureProvider(Enum):
    BUILTIN = "builtin"
    EXTERNAL = "external"


@dataclass(frozen=True)
class PipelineConfig:
    # map
    voxel_size: float = 1.0
    n_max: int = 20
    point_spacing_ratio: float = 0.1
    fit_surfels: bool = True
    plane_rms_max: float = 0.05
    planarity_min: float = 0.75

    # subsampling
    alpha: float = 0.5
    beta: float = 1.5
    saliency_keep_fraction: float = 0.7
    k_salient: int = 3

    # scan-to-scan
    match_mode: MatchMode = MatchMode.MUTUAL
    ransac_max_iterations: int = 50_000
    ransac_inlier_threshold: float = 0.6
    ransac_confidence: float = 0.999
    ransac_max_keypoints: int = 2000

    # scan-to-map
    icp_max_iterations: int = 100
    icp_convergence: float = 1e-4
    icp_max_halvings: int = 5
    tau_default: float = 2.0
    tau_floor: float = 0.3
    delta_min: float = 0.1

    # input
    min_range: float = 0.0
    max_range: float = 100.0
    clockwise: bool = False
    feature_provider: FeatureProvider = FeatureProvider.BUILTIN
    descriptor_radius: float = 1.0
    descriptor_bins: int = 11

    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        checks = [
            (self.voxel_size > 0, "voxel_size must be positive"),
            (self.n_max >= 1, "n_max must be at least 1"),
            (self.point_spacing_ratio >= 0, "point_spacing_ratio must be >= 0"),
            (0 < self.alpha <= 1, "alpha must lie in (0, 1]"),
            (1 <= self.beta <= 2, "beta must lie in [1, 2]"),
            (
                0 < self.saliency_keep_fraction <= 1,
                "saliency_keep_fraction must lie in (0, 1]",
            ),
            (self.k_salient >= 1, "k_salient must be at least 1"),
            (self.ransac_max_iterations >= 1, "ransac_max_iterations must be >= 1"),
            (self.ransac_inlier_threshold > 0, "ransac_inlier_threshold must be > 0"),
            (0 < self.ransac_confidence < 1, "ransac_confidence must lie in (0, 1)"),
            (self.ransac_max_keypoints >= 3, "ransac_max_keypoints must be >= 3"),
            (self.icp_max_iterations >= 1, "icp_max_iterations must be >= 1"),
            (self.icp_convergence > 0, "icp_convergence must be positive"),
            (self.icp_max_halvings >= 0, "icp_max_halvings must be >= 0"),
            (self.tau_floor > 0, "tau_floor must be positive"),
            (self.tau_default >= self.tau_floor, "tau_default must be >= tau_floor"),
            (self.delta_min >= 0, "delta_min must be >= 0"),
            (0 <= self.min_range < self.max_range, "need 0 <= min_range < max_range"),
            (self.descriptor_radius > 0, "descriptor_radius must be positive"),
            (self.descriptor_bins >= 2, "descriptor_bins must be at least 2"),
            (self.threads >= 1, "threads must be at least 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise InvalidConfigValue(message)

    @property
    def min_point_spacing(self) -> float:
        return self.point_spacing_ratio * self.voxel_size

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]


def _parse_value(key: str, raw: str) -> Any:
    default = next(
        f.default for f in dataclasses.fields(PipelineConfig) if f.name == key
    )
    try:
        match default:
            case bool():
                lowered = raw.strip().lower()
                if lowered not in ("true", "false"):
                    raise ValueError(raw)
                return lowered == "true"
            case Enum():
                return type(default)(raw.strip())
            case int():
                return int(raw)
            case float():
                return float(raw)
    except ValueError:
        raise InvalidConfigValue(f"Invalid value for {key}: {raw!r}") from None

    raise ConfigError(f"Unsupported config key type for {key}")


def _format_value(value: Any) -> str:
    match value:
        case bool():
            return "true" if value else "false"
        case Enum():
            return str(value.value)
        case float():
            return repr(value)
        case _:
            return str(value)


def parse_config(text: str) -> PipelineConfig:
    values: dict[str, Any] = {}
    known = set(PipelineConfig.keys())

    for line_number, line in enumerate(text.splitlines(), start=1):
        line = line.split(COMMENT, 1)[0].strip()
        if not line:
            continue
        if SEPARATOR not in line:
            raise ConfigError(f"Line {line_number}: expected 'key = value'")

        key, raw = (part.strip() for part in line.split(SEPARATOR, 1))
        if key not in known:
            raise UnknownConfigKey(key)
        values[key] = _parse_value(key, raw)

    for key in PipelineConfig.keys():
        if key not in values:
            raise MissingConfigKey(key)

    return PipelineConfig(**values)


def load_config(path: str) -> PipelineConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise IoFailure(f"Cannot read config {path}: {e}") from e

    return parse_config(text)


def dump_config(config: PipelineConfig) -> str:
    return "".join(
        f"{key} = {_format_value(getattr(config, key))}\n"
        for key in PipelineConfig.keys()
    )


def write_config(path: str, config: PipelineConfig) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        f.write(dump_config(config))


def apply_overrides(
    config: PipelineConfig, overrides: dict[str, str]
) -> PipelineConfig:
    """Replace config values with raw string overrides (flags win over the file)."""
    known = set(PipelineConfig.keys())
    parsed = {}
    for key, raw in overrides.items():
        if key not in known:
            raise UnknownConfigKey(key)
        parsed[key] = _parse_value(key, raw)

    return dataclasses.replace(config, **parsed)
