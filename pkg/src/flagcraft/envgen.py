"""Multi-flag environment generation.

Given a technique list and a seed: apply role dressing, then per technique
sample a target directory beneath one of the sanctioned base directories,
draw a fresh flag, pick a variant, run the plant script (transferred
content-encoded and deleted afterwards by the sandbox layer), and record the
manifest entry. Construction is deterministic given (library content,
technique ids, seed, role); a failed plant aborts the whole environment.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from typing import Any, Mapping

from .errors import ConfigError, EnvConstructionError
from .flags import gen_flag, redact
from .library import Technique
from .roles import render_role
from .sandbox import Sandbox, SandboxFactory

TARGET_BASE_DIRS = ("/home/user", "/var/tmp", "/opt/app", "/srv", "/tmp")

DEFAULT_N_FLAGS = 8
DEFAULT_POINTS = 15


@dataclass(frozen=True)
class PlantedFlag:
    technique_id: str
    variant_index: int
    target_dir: str
    flag: str
    points: int
    plant_exit: int
    plant_output: bytes

    def manifest_entry(self) -> dict[str, Any]:
        return {
            "technique_id": self.technique_id,
            "variant_index": self.variant_index,
            "target_dir": self.target_dir,
            "flag": self.flag,
            "points": self.points,
            "plant_exit": self.plant_exit,
        }


@dataclass
class MultiFlagEnv:
    sandbox: Sandbox
    seed: int
    role: str | None
    planted: tuple[PlantedFlag, ...]

    @property
    def flags(self) -> tuple[str, ...]:
        return tuple(p.flag for p in self.planted)

    def manifest(self) -> dict[str, Any]:
        return {
            "sandbox_handle": self.sandbox.handle,
            "seed": self.seed,
            "role": self.role,
            "planted": [p.manifest_entry() for p in self.planted],
        }

    def manifest_json(self, *, reveal_flags: bool = True) -> str:
        text = json.dumps(self.manifest(), indent=2)
        return text if reveal_flags else redact(text)


def apply_role_dressing(sb: Sandbox, role: str | None, seed: int) -> None:
    """Write the role's template files; idempotent per (role, seed)."""
    if role is None or role == "none":
        return
    files = render_role(role, seed)
    for path in sorted(files):
        sb.write_file(path, files[path])


def generate_env(
    library: Mapping[str, Technique],
    technique_ids: list[str],
    seed: int,
    role: str | None = None,
    *,
    factory: SandboxFactory,
    n_flags: int = DEFAULT_N_FLAGS,
    points: int = DEFAULT_POINTS,
) -> MultiFlagEnv:
    """Provision a sandbox holding ``n_flags`` independently planted flags.

    Per technique the seeded draw order is fixed: base directory, fresh
    subdirectory, flag (regenerated on the negligible chance of collision),
    then variant index. Role dressing precedes all planting.
    """
    if len(technique_ids) != n_flags:
        raise ConfigError(
            f"expected {n_flags} technique ids, got {len(technique_ids)}"
        )
    if len(set(technique_ids)) != len(technique_ids):
        raise ConfigError("technique ids must be distinct within one environment")
    missing = [tid for tid in technique_ids if tid not in library]
    if missing:
        raise EnvConstructionError(f"unknown technique ids: {missing}")

    rng = random.Random(seed)
    sb = factory.create(seed=seed)
    try:
        apply_role_dressing(sb, role, seed)
        planted: list[PlantedFlag] = []
        used_flags: set[str] = set()
        for tid in technique_ids:
            technique = library[tid]
            base = rng.choice(TARGET_BASE_DIRS)
            target_dir = f"{base}/{rng.getrandbits(32):08x}"
            flag = gen_flag(rng)
            while flag in used_flags:
                flag = gen_flag(rng)
            used_flags.add(flag)
            variant_index = rng.randrange(len(technique.variants))
            variant = technique.variants[variant_index]
            physical_dir = sb.ensure_dir(target_dir)
            result = sb.exec_script(
                variant.plant_script, [physical_dir, flag], cwd=physical_dir
            )
            if result.exit_code != 0:
                raise EnvConstructionError(
                    f"plant for technique {tid!r} exited "
                    f"{result.exit_code}: {result.stderr_text.strip()[:500]}"
                )
            planted.append(
                PlantedFlag(
                    technique_id=tid,
                    variant_index=variant_index,
                    target_dir=target_dir,
                    flag=flag,
                    points=points,
                    plant_exit=result.exit_code,
                    plant_output=result.stdout + result.stderr,
                )
            )
        return MultiFlagEnv(sandbox=sb, seed=seed, role=role, planted=tuple(planted))
    except BaseException:
        factory.destroy(sb)
        raise
