"""Technique store: JSON/JSONL persistence, script similarity, greedy dedup.

On-disk layout under a library root:

    <root>/techniques/<id>.jsonl   one harvest-attempt object per line
    <root>/library/<id>.json       canonical technique record
    <root>/library/_manifest.json  {id: variant count}

All files are UTF-8 with LF line endings. Reads are safe from concurrent
callers; writes to one root must be serialized by the caller.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
from dataclasses import dataclass, field, replace
from difflib import SequenceMatcher
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError, LibraryError, LibraryParseError

TECHNIQUE_ID_RE = re.compile(r"[a-z0-9_]+")

DEFAULT_DEDUP_THRESHOLD = 0.85


@dataclass(frozen=True)
class StageFlags:
    """Per-attempt progress through the five-stage pipeline."""

    explored: bool = False
    mechanically_verified: bool = False
    synthesized: bool = False
    portable: bool = False

    def to_dict(self) -> dict[str, bool]:
        return {
            "explored": self.explored,
            "mechanically_verified": self.mechanically_verified,
            "synthesized": self.synthesized,
            "portable": self.portable,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StageFlags":
        return cls(
            explored=bool(data.get("explored", False)),
            mechanically_verified=bool(data.get("mechanically_verified", False)),
            synthesized=bool(data.get("synthesized", False)),
            portable=bool(data.get("portable", False)),
        )


@dataclass(frozen=True)
class TechniqueVariant:
    """One parameterized plant/recovery script pair.

    plant_script takes two positional parameters (target directory, flag);
    recovery_script takes one (target directory).
    """

    plant_script: str
    recovery_script: str
    dependencies: tuple[str, ...]
    provenance_id: str
    stage_flags: StageFlags = field(default_factory=StageFlags)

    def __post_init__(self) -> None:
        if not self.plant_script or not self.recovery_script:
            raise LibraryError("variant scripts must be non-empty")
        f = self.stage_flags
        # portable implies mechanically_verified implies explored
        if (f.portable and not f.mechanically_verified) or (
            f.mechanically_verified and not f.explored
        ):
            raise LibraryError(
                f"inconsistent stage flags for variant {self.provenance_id!r}"
            )

    @property
    def combined_script(self) -> str:
        return self.plant_script + "\n" + self.recovery_script

    @property
    def preference_key(self) -> tuple[int, int, str]:
        """Total order: fewest dependencies, shortest scripts, provenance_id."""
        return (
            len(self.dependencies),
            len(self.plant_script) + len(self.recovery_script),
            self.provenance_id,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "plant_script": self.plant_script,
            "recovery_script": self.recovery_script,
            "dependencies": list(self.dependencies),
            "provenance_id": self.provenance_id,
            "stage_flags": self.stage_flags.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TechniqueVariant":
        return cls(
            plant_script=data["plant_script"],
            recovery_script=data["recovery_script"],
            dependencies=tuple(data.get("dependencies", ())),
            provenance_id=data["provenance_id"],
            stage_flags=StageFlags.from_dict(data.get("stage_flags", {})),
        )


@dataclass(frozen=True)
class Technique:
    """Canonical id grouping deduplicated variants."""

    id: str
    variants: tuple[TechniqueVariant, ...]
    family: str | None = None

    def __post_init__(self) -> None:
        if not TECHNIQUE_ID_RE.fullmatch(self.id):
            raise LibraryError(f"invalid technique id {self.id!r}")

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {"id": self.id}
        if self.family is not None:
            data["family"] = self.family
        data["variants"] = [v.to_dict() for v in self.variants]
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Technique":
        return cls(
            id=data["id"],
            variants=tuple(TechniqueVariant.from_dict(v) for v in data["variants"]),
            family=data.get("family"),
        )


def similarity(a: str, b: str) -> float:
    """Gestalt pattern-matching ratio 2M/T over the two byte strings.

    M is the total length of recursively found longest common contiguous
    blocks, T = |a| + |b|. Junk heuristics are disabled so the metric is the
    pure ratio. Empty-vs-empty is 1.0; empty-vs-non-empty is 0.0.
    """
    return SequenceMatcher(None, a, b, autojunk=False).ratio()


def variant_similarity(a: TechniqueVariant, b: TechniqueVariant) -> float:
    """Similarity over the concatenated plant+recovery text of each variant.

    Symmetrized (max over both argument orders): the raw ratio can differ
    slightly on swapped arguments, and the dedup guarantee is over unordered
    pairs.
    """
    return max(
        similarity(a.combined_script, b.combined_script),
        similarity(b.combined_script, a.combined_script),
    )


def canonicalize(
    variants: Iterable[TechniqueVariant],
    threshold: float = DEFAULT_DEDUP_THRESHOLD,
) -> list[TechniqueVariant]:
    """Greedy dedup: prefer fewer dependencies, then shorter scripts.

    Candidates are visited in preference order; each is retained iff its
    similarity to every already-retained variant is strictly below the
    threshold. Deterministic for a fixed input set; empty input yields an
    empty list.
    """
    if not 0.0 < threshold <= 1.0:
        raise ConfigError(f"dedup threshold must be in (0, 1], got {threshold}")
    kept: list[TechniqueVariant] = []
    for candidate in sorted(variants, key=lambda v: v.preference_key):
        if all(variant_similarity(candidate, k) < threshold for k in kept):
            kept.append(candidate)
    return kept


def mark_portable(variant: TechniqueVariant) -> TechniqueVariant:
    return replace(
        variant,
        stage_flags=replace(variant.stage_flags, portable=True),
    )


# --- persistence ------------------------------------------------------------

def library_dir(root: Path) -> Path:
    return Path(root) / "library"


def techniques_dir(root: Path) -> Path:
    return Path(root) / "techniques"


def manifest_path(root: Path) -> Path:
    return library_dir(root) / "_manifest.json"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _load_json(path: Path) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise LibraryParseError(f"{path}:{exc.lineno}: {exc.msg}") from exc


def load_technique(path: Path) -> Technique:
    data = _load_json(path)
    technique = Technique.from_dict(data)
    if technique.id != path.stem:
        raise LibraryError(
            f"{path}: technique id {technique.id!r} does not match filename"
        )
    return technique


def load_library(root: Path) -> dict[str, Technique]:
    """Load every canonical record under ``<root>/library``."""
    out: dict[str, Technique] = {}
    lib = library_dir(root)
    if not lib.is_dir():
        return out
    for path in sorted(lib.glob("*.json")):
        if path.name == "_manifest.json":
            continue
        technique = load_technique(path)
        if technique.id in out:
            raise LibraryError(f"duplicate technique id {technique.id!r} in {path}")
        out[technique.id] = technique
    return out


def save_technique(root: Path, technique: Technique) -> Path:
    """Atomically rewrite ``<id>.json`` and regenerate the manifest."""
    path = library_dir(root) / f"{technique.id}.json"
    _atomic_write(path, json.dumps(technique.to_dict(), indent=2) + "\n")
    rebuild_manifest(root)
    return path


def rebuild_manifest(root: Path) -> dict[str, int]:
    entries = {tid: len(t.variants) for tid, t in load_library(root).items()}
    _atomic_write(
        manifest_path(root), json.dumps(dict(sorted(entries.items())), indent=2) + "\n"
    )
    return entries


def load_manifest(root: Path) -> dict[str, int]:
    path = manifest_path(root)
    if not path.is_file():
        return {}
    data = _load_json(path)
    return {str(k): int(v) for k, v in data.items()}


def append_attempt(root: Path, technique_id: str, record: Mapping[str, Any]) -> None:
    """Append one harvest-attempt object to ``<root>/techniques/<id>.jsonl``."""
    if not TECHNIQUE_ID_RE.fullmatch(technique_id):
        raise LibraryError(f"invalid technique id {technique_id!r}")
    path = techniques_dir(root) / f"{technique_id}.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(dict(record)) + "\n")


def read_attempts(root: Path, technique_id: str) -> list[dict[str, Any]]:
    path = techniques_dir(root) / f"{technique_id}.jsonl"
    if not path.is_file():
        return []
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise LibraryParseError(f"{path}:{lineno}: {exc.msg}") from exc
    return records
