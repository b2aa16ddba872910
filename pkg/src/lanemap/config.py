"""Pipeline configuration: an INI file with one section per stage.

Example::

    [classify]
    patch_size = 12
    stride = 4

    [link]
    distance_threshold = 1.0

Unknown keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from .classify import FEATURE_KINDS, PATCH_SIZES, ForestConfig
from .link import TightnessConfig
from .segment import SegmentConfig


class ConfigError(ValueError):
    pass


@dataclass
class TileConfig:
    mode: str = "directory"
    directory: str | None = None
    url_template: str | None = None
    cache_dir: str | None = None
    map_version: int = 1
    level: int = 20


@dataclass
class PatchConfig:
    patch_size: int = 12
    stride: int = 4
    feature_kind: str = "pixel"


@dataclass
class RunConfig:
    seed: int = 0
    chunk_length: float = 12.0
    corridor_half_width: float = 8.0
    cv_folds: int = 10
    t_d: float = 0.5
    jobs: int = 1


@dataclass
class PipelineConfig:
    tiles: TileConfig = field(default_factory=TileConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    link: TightnessConfig = field(default_factory=TightnessConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> None:
        p = self.patch
        if p.patch_size not in PATCH_SIZES:
            raise ConfigError(f"patch_size must be one of {PATCH_SIZES}")
        if not 1 <= p.stride <= p.patch_size:
            raise ConfigError("stride must lie in [1, patch_size]")
        if p.feature_kind not in FEATURE_KINDS:
            raise ConfigError(f"feature_kind must be one of {FEATURE_KINDS}")
        r = self.run
        if r.chunk_length <= 0 or r.corridor_half_width <= 0 or r.t_d <= 0:
            raise ConfigError("chunk_length, corridor_half_width and t_d must be positive")
        if r.cv_folds < 0 or r.cv_folds == 1:
            raise ConfigError("cv_folds must be 0 (off) or at least 2")
        if r.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if self.tiles.mode not in ("directory", "http"):
            raise ConfigError("tiles.mode must be 'directory' or 'http'")

    def stage_seed(self, name: str) -> int:
        """Independent 32-bit seed for a named stage, derived from the root seed."""
        return stage_seed(self.run.seed, name)


def stage_seed(root: int, name: str) -> int:
    return int(np.random.SeedSequence([int(root), zlib.crc32(name.encode())]).generate_state(1)[0])


_SECTIONS = {
    "tiles": "tiles",
    "classify": "patch",
    "forest": "forest",
    "segment": "segment",
    "link": "link",
    "run": "run",
}


def _convert(raw: str, current, name: str):
    if isinstance(current, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if current is None:
        if raw.strip().lower() in ("", "none"):
            return None
        if name == "expected_lane_count":
            return int(raw)
        return raw
    return raw


def load_config(text: str = "", overrides: dict | None = None) -> PipelineConfig:
    """Parse INI text, then apply ``{"section.key": value}`` overrides."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    values: dict[str, dict[str, object]] = {attr: {} for attr in _SECTIONS.values()}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp[section].items():
            values[_SECTIONS[section]][key] = raw
    for dotted, v in (overrides or {}).items():
        if v is None:
            continue
        section, key = dotted.split(".", 1)
        values[_SECTIONS[section]][key] = v
    built = {}
    for attr, cls in (("tiles", TileConfig), ("patch", PatchConfig), ("forest", ForestConfig),
                      ("segment", SegmentConfig), ("link", TightnessConfig), ("run", RunConfig)):
        default = cls()
        names = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in values[attr].items():
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{[k for k, a in _SECTIONS.items() if a == attr][0]}]")
            cur = getattr(default, key)
            try:
                kwargs[key] = _convert(raw, cur, key) if isinstance(raw, str) else raw
            except ValueError:
                raise ConfigError(f"bad value {raw!r} for {key}") from None
        try:
            built[attr] = cls(**kwargs)
        except (ValueError, NotImplementedError) as exc:
            raise ConfigError(str(exc)) from None
    cfg = PipelineConfig(**built)
    cfg.validate()
    return cfg
