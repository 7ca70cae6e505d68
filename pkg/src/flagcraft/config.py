"""Operator configuration: flat key-value JSON file, flags override file.

The config file location comes from --config or the FLAGCRAFT_CONFIG
environment variable; every key is optional and defaults to the paper-scale
values (pool of 50 rotating 15, 8 flags x 15 points, turn cost 1, 18 turns).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .sandbox import (
    DEFAULT_MAX_LIVE,
    DEFAULT_OUTPUT_CAP,
    DEFAULT_SCAN_EXCLUDE,
    DEFAULT_TIMEOUT,
    SandboxConfig,
)

CONFIG_ENV_VAR = "FLAGCRAFT_CONFIG"


@dataclass
class Config:
    library_root: str = "data"
    backend: str = "local-dir"
    workdir: str | None = None
    image: str = "ctf-base:dev"
    runtime: str | None = None
    concurrency: int = DEFAULT_MAX_LIVE
    scan_exclude: tuple[str, ...] = DEFAULT_SCAN_EXCLUDE
    timeout: float = DEFAULT_TIMEOUT
    output_cap: int = DEFAULT_OUTPUT_CAP
    pool_size: int = 50
    rotation_rate: float = 0.3
    batch_groups: int = 8
    n_flags: int = 8
    points: int = 15
    turn_cost: int = 1
    max_turns: int = 18
    seed: int = 0
    stdout_cap: int = 8192

    def __post_init__(self) -> None:
        positive = (
            "concurrency", "timeout", "output_cap", "pool_size", "batch_groups",
            "n_flags", "points", "turn_cost", "max_turns", "stdout_cap",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"config key {name!r} must be positive")
        removals = self.rotation_rate * self.pool_size
        if abs(removals - round(removals)) > 1e-9:
            raise ConfigError(
                f"rotation_rate x pool_size must be integral, got {removals}"
            )

    def sandbox_config(self, extra_path: tuple[str, ...] = ()) -> SandboxConfig:
        return SandboxConfig(
            backend=self.backend,
            workdir=Path(self.workdir) if self.workdir else None,
            image=self.image,
            runtime=self.runtime,
            scan_exclude=tuple(self.scan_exclude),
            timeout=self.timeout,
            output_cap=self.output_cap,
            extra_path=extra_path,
            max_live=self.concurrency,
        )


def load_config(path: str | None = None, overrides: dict[str, Any] | None = None) -> Config:
    """Build a Config from file (if any) plus explicit overrides."""
    values: dict[str, Any] = {}
    location = path or os.environ.get(CONFIG_ENV_VAR)
    if location:
        try:
            with open(location, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {location}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{location}:{exc.lineno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{location}: config must be a JSON object")
        values.update(data)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(Config)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "scan_exclude" in values:
        values["scan_exclude"] = tuple(values["scan_exclude"])
    return Config(**values)
