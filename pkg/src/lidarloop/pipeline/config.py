"""Run configuration: defaults, TOML loading and command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..alignment import AlignmentParams
from ..descriptor import DescriptorParams


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    keyframe_size: int = 100
    cell_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    min_points: int = 5
    plane_ratio: float = 3.0
    line_ratio: float = 3.0
    blur_size: int = 5
    blur_sigma: float = 1.0
    plane_thresh: float = 0.90
    line_thresh: float = 0.65
    temporal_exclusion: int = 5
    accept_distance: float = 0.1
    search_radius: float | None = None
    huber_delta: float = 0.5
    align_max_iterations: int = 50
    align_damping: float = 1e-4
    graph_max_iterations: int = 100
    graph_tolerance: float = 1e-12
    write_maps: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        cs = self.cell_size
        if isinstance(cs, (int, float)):
            cs = (float(cs),) * 3
        cs = tuple(float(v) for v in cs)
        if len(cs) != 3:
            raise ConfigError("cell_size needs one or three values")
        self.cell_size = cs
        positive = dict(
            keyframe_size=self.keyframe_size, min_points=self.min_points, plane_ratio=self.plane_ratio,
            line_ratio=self.line_ratio, blur_size=self.blur_size, blur_sigma=self.blur_sigma,
            temporal_exclusion=self.temporal_exclusion, accept_distance=self.accept_distance,
            huber_delta=self.huber_delta, align_max_iterations=self.align_max_iterations,
            align_damping=self.align_damping, graph_max_iterations=self.graph_max_iterations,
            graph_tolerance=self.graph_tolerance,
            cell_size_min=min(cs),
        )
        if self.search_radius is not None:
            positive["search_radius"] = self.search_radius
        for k, v in positive.items():
            if not v > 0:
                raise ConfigError(f"{k} must be positive, got {v}")
        for k in ("plane_thresh", "line_thresh"):
            v = getattr(self, k)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{k} must lie in (0, 1], got {v}")

    def descriptor_params(self) -> DescriptorParams:
        return DescriptorParams(self.min_points, self.plane_ratio, self.line_ratio, self.blur_size, self.blur_sigma)

    def alignment_params(self) -> AlignmentParams:
        return AlignmentParams(search_radius=self.search_radius, huber_delta=self.huber_delta,
                               max_iterations=self.align_max_iterations, damping=self.align_damping,
                               accept_distance=self.accept_distance)

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)


def field_names() -> list[str]:
    return [f.name for f in dataclasses.fields(Config)]


def from_mapping(data: dict, base: Config | None = None) -> Config:
    known = set(field_names())
    flat: dict = {}
    for k, v in data.items():
        if isinstance(v, dict):  # [section] tables are flattened
            flat.update(v)
        else:
            flat[k] = v
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return dataclasses.replace(base or Config(), **flat)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, overrides: dict | None = None) -> Config:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = from_mapping(data)
    if overrides:
        cfg = from_mapping({k: v for k, v in overrides.items() if v is not None}, cfg)
    return cfg


def dump_config(cfg: Config) -> str:
    lines = []
    for name in field_names():
        v = getattr(cfg, name)
        if v is None:
            continue
        if isinstance(v, bool):
            lines.append(f"{name} = {'true' if v else 'false'}")
        elif isinstance(v, tuple):
            lines.append(f"{name} = [{', '.join(repr(float(x)) for x in v)}]")
        else:
            lines.append(f"{name} = {v!r}")
    return "\n".join(lines) + "\n"
