"""Run configuration: flat key=value text with typed sections.

The canonical serialization round-trips losslessly and its sha256 goes
into every output manifest. Any key can be overridden through the
environment as ``DEPTHBEV_<SECTION>__<KEY>``.
"""

from __future__ import annotations

import hashlib
import os
import platform
from typing import Any, Mapping

import numpy as np

from .errors import ConfigError

ENV_PREFIX = "DEPTHBEV_"

# section -> key -> (type, default). bool values serialize as true/false.
SCHEMA: dict[str, dict[str, tuple[type, Any]]] = {
    "run": {
        "seed": (int, 0),
        "out_dir": (str, "out"),
    },
    "grid": {
        "width": (int, 60),
        "height": (int, 60),
        "cell_size": (float, 0.6),
    },
    "model": {
        "channels": (int, 32),
        "local_channels": (int, 32),
        "voxel_channels": (int, 16),
        "heads": (int, 4),
        "embed_mode": (str, "multiply"),
        "ffn_mult": (int, 2),
        "classes": (int, 3),
        "cross_instance": (bool, False),
        "use_global": (bool, True),
        "use_local": (bool, True),
        "use_depth": (bool, True),
    },
    "voxel": {
        "xy_size": (float, 0.3),
        "z_size": (float, 0.4),
        "z_min": (float, -2.0),
        "z_max": (float, 4.0),
    },
    "camera": {
        "count": (int, 2),
        "rows": (int, 32),
        "cols": (int, 64),
        "fov_deg": (float, 90.0),
        "height": (float, 1.5),
    },
    "lift": {
        "bins": (int, 24),
        "near": (float, 1.0),
        "far": (float, 60.0),
        "sharpness": (float, 3.0),
        "background_depth": (str, "far"),
    },
    "scene": {
        "count": (int, 8),
        "objects": (int, 6),
        "depth_min": (float, 4.0),
        "depth_max": (float, 16.0),
        "far_fraction": (float, 0.0),
        "far_depth": (float, 40.0),
        "azimuth_deg": (float, 35.0),
        "background_rate": (float, 0.02),
        "image_channels": (int, 8),
        "image_noise": (float, 0.05),
        "distractors": (float, 0.0),
        "far_lidar_points": (float, -1.0),
    },
    "proposals": {
        "count": (int, 8),
        "jitter_sigma": (float, 0.5),
    },
    "train": {
        "steps": (int, 200),
        "learning_rate": (float, 0.02),
        "optimizer": (str, "adam"),
        "box_weight": (float, 1.0),
        "focal_alpha": (float, 0.25),
        "focal_gamma": (float, 2.0),
    },
    "corruption": {
        "kind": (str, "none"),
        "threshold": (float, 40.0),
        "drop_prob": (float, 0.5),
        "noise_sigma": (float, 0.1),
        "seed": (int, 0),
    },
    "profile": {
        "bin_width": (float, 10.0),
    },
}


def _parse_value(section: str, key: str, raw: str) -> Any:
    typ, _ = SCHEMA[section][key]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}") from e


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


class _Section:
    def __init__(self, values: dict[str, Any]):
        self.__dict__.update(values)

    def as_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


class RunConfig:
    """Typed view over the schema; attribute access per section."""

    def __init__(self, values: Mapping[str, Mapping[str, Any]] | None = None):
        merged: dict[str, dict[str, Any]] = {}
        values = values or {}
        for section, keys in SCHEMA.items():
            got = dict(values.get(section, {}))
            merged[section] = {}
            for key, (typ, default) in keys.items():
                v = got.pop(key, default)
                if typ is float and isinstance(v, int) and not isinstance(v, bool):
                    v = float(v)
                if not isinstance(v, typ) or (typ is not bool and isinstance(v, bool)):
                    raise ConfigError(f"[{section}] {key}: expected {typ.__name__}, got {v!r}")
                merged[section][key] = v
            if got:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(got)}")
        unknown = set(values) - set(SCHEMA)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        self._values = merged
        for section, keys in merged.items():
            setattr(self, section, _Section(keys))

    # -- serialization ------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                lines.append(f"{key} = {_format_value(self._values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values: dict[str, dict[str, Any]] = {}
        section = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in SCHEMA:
                    raise ConfigError(f"line {lineno}: unknown section [{section}]")
                values.setdefault(section, {})
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            if section is None:
                raise ConfigError(f"line {lineno}: key before any [section]")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in SCHEMA[section]:
                raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
            values[section][key] = _parse_value(section, key, val)
        return cls(values)

    @classmethod
    def from_file(cls, path, env: Mapping[str, str] | None = None) -> "RunConfig":
        with open(path) as fh:
            cfg = cls.from_text(fh.read())
        return cfg.with_env(os.environ if env is None else env)

    def with_env(self, env: Mapping[str, str]) -> "RunConfig":
        """New config with ``DEPTHBEV_SECTION__KEY`` overrides applied."""
        values = {s: dict(v) for s, v in self._values.items()}
        for name, raw in env.items():
            if not name.startswith(ENV_PREFIX):
                continue
            rest = name[len(ENV_PREFIX):]
            if "__" not in rest:
                raise ConfigError(f"malformed override {name}; use {ENV_PREFIX}SECTION__KEY")
            section, key = rest.lower().split("__", 1)
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError(f"override {name} does not match any config key")
            values[section][key] = _parse_value(section, key, raw)
        return RunConfig(values)

    def with_overrides(self, **section_updates: dict[str, Any]) -> "RunConfig":
        values = {s: dict(v) for s, v in self._values.items()}
        for section, upd in section_updates.items():
            if section not in values:
                raise ConfigError(f"unknown section {section!r}")
            values[section].update(upd)
        return RunConfig(values)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def as_dict(self) -> dict[str, dict[str, Any]]:
        return {s: dict(v) for s, v in self._values.items()}

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values


def default_config() -> RunConfig:
    return RunConfig()


def paper_shape_config() -> RunConfig:
    """Full-resolution shape preset: 180x180 BEV, 128 channels, 200 proposals."""
    return RunConfig({
        "grid": {"width": 180, "height": 180, "cell_size": 0.6},
        "model": {"channels": 128, "local_channels": 128, "voxel_channels": 32, "heads": 4},
        "voxel": {"xy_size": 0.075, "z_size": 0.1, "z_min": -3.0, "z_max": 5.0},
        "camera": {"count": 6, "rows": 32, "cols": 88},
        "lift": {"bins": 40, "near": 1.0, "far": 60.0},
        "scene": {"count": 1, "objects": 12, "depth_min": 4.0, "depth_max": 50.0},
        "proposals": {"count": 200},
    })


def build_manifest(cfg: RunConfig, seed: int) -> dict:
    """Stable provenance record written next to every verb's outputs."""
    from . import __version__

    return {
        "config_sha256": cfg.sha256(),
        "seed": int(seed),
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
    }
