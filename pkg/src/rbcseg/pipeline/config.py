"""Run configuration: defaults, ``key = value`` files and overrides."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from ..raster import CHANNELS
from ..separate import SeparationParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    channel: str = "green"
    clip_limit: float = 2.0
    tile_grid: tuple[int, int] = (8, 8)
    foreground_dark: bool = True
    morph_radius: int = 1
    min_area: float = 300.0
    border_margin: int = 1
    k: int = 8
    inside_ratio: float = 0.8
    novelty_ratio: float = 0.2
    min_ellipse_area: float | None = None  # None: same as min_area
    min_fit_points: int = 5
    merge_gap: int = 4
    canvas: int = 72
    stats_path: str | None = None
    workers: int = 1

    def __post_init__(self):
        try:
            self.validate()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def validate(self) -> None:
        if self.channel not in CHANNELS:
            raise ConfigError(f"channel must be one of {sorted(CHANNELS)}")
        if not self.clip_limit > 0:
            raise ConfigError("clip_limit must be positive")
        if len(self.tile_grid) != 2 or min(self.tile_grid) < 1:
            raise ConfigError("tile_grid must be two integers >= 1")
        if self.morph_radius < 0:
            raise ConfigError("morph_radius must be >= 0")
        if self.min_area < 0:
            raise ConfigError("min_area must be >= 0")
        if self.border_margin < 0:
            raise ConfigError("border_margin must be >= 0")
        if self.canvas < 48:
            raise ConfigError("canvas must be >= 48 pixels")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.separation  # runs SeparationParams validation

    @property
    def separation(self) -> SeparationParams:
        try:
            return SeparationParams(
                k=self.k,
                min_ellipse_area=self.min_area if self.min_ellipse_area is None else self.min_ellipse_area,
                inside_ratio=self.inside_ratio,
                novelty_ratio=self.novelty_ratio,
                min_fit_points=self.min_fit_points,
                merge_gap=self.merge_gap,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def _coerce(name: str, raw: str):
    raw = raw.strip().strip('"').strip("'")
    if name == "tile_grid":
        parts = raw.replace("x", ",").split(",")
        return tuple(int(p) for p in parts)
    if name == "foreground_dark":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if name in ("channel",):
        return raw
    if name in ("stats_path", "min_ellipse_area"):
        if raw.lower() in ("", "none"):
            return None
        return raw if name == "stats_path" else float(raw)
    default = _FIELDS[name].default
    return int(raw) if isinstance(default, int) else float(raw)


def parse_overrides(pairs: dict) -> dict:
    out = {}
    for key, raw in pairs.items():
        name = key.strip().replace("-", "_")
        if name not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[name] = _coerce(name, str(raw)) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    return out


def load_config(path=None, **overrides) -> PipelineConfig:
    """Defaults, then ``key = value`` lines from ``path``, then ``overrides``.

    Lines may sit under an optional ``[pipeline]`` header; ``#`` starts a comment.
    """
    values: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not text.lstrip().startswith("["):
            text = "[pipeline]\n" + text
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for section in parser.sections():
            values.update(parse_overrides(dict(parser[section])))
    values.update(parse_overrides({k: v for k, v in overrides.items() if v is not None}))
    return PipelineConfig(**values)
