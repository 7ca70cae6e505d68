"""Five-stage harvest pipeline.

Stage 1 drives a pluggable Explorer that hides a flag and proposes a recovery
command; stage 2 mechanically verifies (no plaintext flag on disk, recovery
prints the flag and exits zero); stage 3 drives a pluggable Synthesizer that
rewrites the attempt into a parameterized plant/recovery pair without any
shell execution; stage 4 re-runs the pair in a fresh sandbox with a fresh
directory and fresh flag (the bidirectional contract: invisibility AND
recoverability must both hold); stage 5 hands survivors to library
canonicalization. The funnel report accounts for survivors per stage.

The shipped ReplayExplorer plays back recorded command sequences; a
hosted-model explorer can implement the same protocol (it receives the system
prompt and full turn history) without core changes. The shipped
TemplateSynthesizer is a pure textual rewrite that substitutes the recorded
directory and flag literals with positional-parameter references.
"""

from __future__ import annotations

import json
import random
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

from .errors import SynthesisError
from .flags import gen_flag
from .library import (
    StageFlags,
    Technique,
    TechniqueVariant,
    append_attempt,
    canonicalize,
    mark_portable,
    save_technique,
)
from .sandbox import ExecResult, Sandbox, SandboxFactory

DEFAULT_MAX_TURNS = 10

DEFAULT_SYSTEM_PROMPT = (
    "You are operating a bash shell inside a scratch sandbox. Hide the given "
    "flag under the given target directory using the named technique, one "
    "command per turn, then state a single recovery command that prints the "
    "flag and exits zero."
)

# Placeholder tokens understood by ReplayExplorer recordings.
TARGET_DIR_TOKEN = "@@TARGET_DIR@@"
FLAG_TOKEN = "@@FLAG@@"


@dataclass(frozen=True)
class Turn:
    command: str
    result: ExecResult


@dataclass(frozen=True)
class Command:
    text: str


@dataclass(frozen=True)
class Candidate:
    recovery: str


@dataclass(frozen=True)
class ExplorationContext:
    technique_id: str
    flag: str
    target_dir: str
    system_prompt: str
    history: tuple[Turn, ...]


class Explorer(Protocol):
    def step(self, ctx: ExplorationContext) -> Command | Candidate | None:
        """Next shell command, a final recovery candidate, or None to give up."""


class Synthesizer(Protocol):
    def synthesize(self, attempt: "HarvestAttempt") -> "SynthesizedScripts":
        """Textual rewrite of a verified attempt into a parameterized pair."""


@dataclass(frozen=True)
class SynthesizedScripts:
    plant_script: str
    recovery_script: str
    dependencies: tuple[str, ...]


@dataclass
class HarvestAttempt:
    technique_id: str
    provenance_id: str
    transcript: list[Turn]
    candidate_recovery: str | None
    original_flag: str
    original_dir: str
    stage_flags: StageFlags = field(default_factory=StageFlags)
    started_at: float = 0.0
    finished_at: float = 0.0

    def to_record(self) -> dict[str, Any]:
        """JSONL attempt record for ``<root>/techniques/<id>.jsonl``."""
        return {
            "provenance_id": self.provenance_id,
            "transcript": [
                {
                    "command": turn.command,
                    "exit_code": turn.result.exit_code,
                    "stdout": turn.result.stdout_text,
                    "stderr": turn.result.stderr_text,
                }
                for turn in self.transcript
            ],
            "candidate_recovery": self.candidate_recovery,
            "stage_flags": self.stage_flags.to_dict(),
            "timestamps": {"started": self.started_at, "finished": self.finished_at},
        }


@dataclass(frozen=True)
class Verdict:
    passed: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.passed


@dataclass(frozen=True)
class Recording:
    """Replayable exploration: commands plus the final recovery candidate.

    Commands may reference the placeholder tokens, which are bound to the
    fresh target directory and flag at replay time.
    """

    technique_id: str
    commands: tuple[str, ...]
    candidate_recovery: str | None
    family: str | None = None

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "technique_id": self.technique_id,
            "commands": list(self.commands),
            "candidate_recovery": self.candidate_recovery,
        }
        if self.family is not None:
            data["family"] = self.family
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Recording":
        return cls(
            technique_id=data["technique_id"],
            commands=tuple(data["commands"]),
            candidate_recovery=data.get("candidate_recovery"),
            family=data.get("family"),
        )


def load_recording(path: Path) -> Recording:
    with open(path, encoding="utf-8") as fh:
        return Recording.from_dict(json.load(fh))


class ReplayExplorer:
    """Plays a Recording back, binding placeholders to the live context."""

    def __init__(self, recording: Recording) -> None:
        self._recording = recording
        self._next = 0
        self._emitted_candidate = False

    @staticmethod
    def _fill(text: str, ctx: ExplorationContext) -> str:
        return text.replace(TARGET_DIR_TOKEN, ctx.target_dir).replace(
            FLAG_TOKEN, ctx.flag
        )

    def step(self, ctx: ExplorationContext) -> Command | Candidate | None:
        if self._next < len(self._recording.commands):
            command = self._fill(self._recording.commands[self._next], ctx)
            self._next += 1
            return Command(command)
        if self._recording.candidate_recovery is not None and not self._emitted_candidate:
            self._emitted_candidate = True
            return Candidate(self._fill(self._recording.candidate_recovery, ctx))
        return None


def run_exploration(
    explorer: Explorer,
    sb: Sandbox,
    technique_id: str,
    flag: str,
    *,
    original_dir: str,
    provenance_id: str | None = None,
    max_turns: int = DEFAULT_MAX_TURNS,
    system_prompt: str = DEFAULT_SYSTEM_PROMPT,
) -> HarvestAttempt:
    """Stage 1: drive the explorer turn by turn under the turn budget.

    The attempt is explored iff the explorer terminated with a recovery
    candidate within the budget; exhaustion is recorded, not raised.

    ``original_dir`` is a logical path; the transcript (and the recorded
    attempt) reference its physical location inside the sandbox, which is
    what the explorer's commands actually touch.
    """
    physical_dir = sb.ensure_dir(original_dir)
    attempt = HarvestAttempt(
        technique_id=technique_id,
        provenance_id=provenance_id or f"{technique_id}-{sb.handle}",
        transcript=[],
        candidate_recovery=None,
        original_flag=flag,
        original_dir=physical_dir,
        started_at=time.time(),
    )
    for _ in range(max_turns):
        ctx = ExplorationContext(
            technique_id=technique_id,
            flag=flag,
            target_dir=physical_dir,
            system_prompt=system_prompt,
            history=tuple(attempt.transcript),
        )
        action = explorer.step(ctx)
        if action is None:
            break
        if isinstance(action, Candidate):
            attempt.candidate_recovery = action.recovery
            break
        if not action.text.strip():
            # Empty command: recorded as a successful no-op turn.
            attempt.transcript.append(
                Turn(action.text, ExecResult(0, b"", b"", 0.0))
            )
            continue
        result = sb.exec_script(action.text, cwd=physical_dir)
        attempt.transcript.append(Turn(action.text, result))
    else:
        # Budget exhausted; give the explorer no further turns.
        pass
    attempt.finished_at = time.time()
    attempt.stage_flags = replace(
        attempt.stage_flags, explored=attempt.candidate_recovery is not None
    )
    return attempt


def mechanical_verify(sb: Sandbox, attempt: HarvestAttempt) -> Verdict:
    """Stage 2: no plaintext flag on disk AND the candidate recovery works.

    Runs in the sandbox still holding the exploration's filesystem state.
    The first failing check names the verdict reason.
    """
    if not attempt.stage_flags.explored or attempt.candidate_recovery is None:
        return Verdict(False, "not-explored")
    scan = sb.scan_for_flag(attempt.original_flag)
    if scan.occurrences > 0:
        return Verdict(False, "plaintext-on-disk")
    result = sb.exec_script(attempt.candidate_recovery, cwd=attempt.original_dir)
    if result.exit_code != 0:
        return Verdict(False, "recovery-exit")
    if attempt.original_flag not in result.stdout_text:
        return Verdict(False, "recovery-mismatch")
    attempt.stage_flags = replace(attempt.stage_flags, mechanically_verified=True)
    return Verdict(True)


_PLANT_PROLOGUE = 'target_dir="$1"\nflag="$2"\n'
_RECOVERY_PROLOGUE = 'target_dir="$1"\n'

# Binaries we recognize when inferring a variant's dependency list.
_KNOWN_TOOLS = frozenset(
    {
        "setfattr", "getfattr", "base64", "base32", "xxd", "od", "objcopy",
        "readelf", "nm", "strings", "openssl", "gpg", "sqlite3", "zstd",
        "gzip", "bzip2", "xz", "tar", "cpio", "ar", "python3", "awk", "grep",
        "sed", "sort", "uniq", "tr", "cut", "head", "tail", "wc", "find",
        "touch", "stat", "file", "ls", "cat", "mkdir", "cp", "mv", "rm",
        "ln", "dd", "split", "paste", "rev", "tac", "diff", "chmod", "chattr",
        "lsattr", "mount", "uuencode", "iconv", "jq", "curl", "tee",
    }
)


def _parameterize(text: str, value: str, var: str) -> str:
    """Replace literal ``value`` with a quoted ``${var}`` reference.

    Handles the value appearing bare, or as the opening of a single- or
    double-quoted region, producing valid concatenations in each case.
    """
    ref = '"${' + var + '}"'
    out = text.replace("'" + value, ref + "'")
    out = out.replace('"' + value, ref + '"')
    return out.replace(value, ref)


class TemplateSynthesizer:
    """Pure textual rewrite: recorded literals become positional parameters."""

    def synthesize(self, attempt: HarvestAttempt) -> SynthesizedScripts:
        if attempt.candidate_recovery is None:
            raise SynthesisError(
                f"attempt {attempt.provenance_id!r} has no recovery candidate"
            )
        body = "\n".join(
            turn.command for turn in attempt.transcript if turn.command.strip()
        )
        if not body:
            raise SynthesisError(
                f"attempt {attempt.provenance_id!r} has an empty transcript"
            )
        plant = _PLANT_PROLOGUE + self._rewrite(body, attempt) + "\n"
        recovery = (
            _RECOVERY_PROLOGUE
            + self._rewrite(attempt.candidate_recovery, attempt)
            + "\n"
        )
        return SynthesizedScripts(
            plant_script=plant,
            recovery_script=recovery,
            dependencies=self._infer_dependencies(plant, recovery),
        )

    @staticmethod
    def _rewrite(text: str, attempt: HarvestAttempt) -> str:
        out = _parameterize(text, attempt.original_dir, "target_dir")
        return _parameterize(out, attempt.original_flag, "flag")

    @staticmethod
    def _infer_dependencies(plant: str, recovery: str) -> tuple[str, ...]:
        tokens = set(re.findall(r"[A-Za-z0-9_.+-]+", plant + "\n" + recovery))
        return tuple(sorted(tokens & _KNOWN_TOOLS))


def synthesize(synth: Synthesizer, attempt: HarvestAttempt) -> TechniqueVariant:
    """Stage 3: parameterize the attempt. No sandbox interaction happens here."""
    scripts = synth.synthesize(attempt)
    if not scripts.plant_script or not scripts.recovery_script:
        raise SynthesisError(
            f"synthesizer returned incomplete scripts for {attempt.provenance_id!r}"
        )
    attempt.stage_flags = replace(attempt.stage_flags, synthesized=True)
    return TechniqueVariant(
        plant_script=scripts.plant_script,
        recovery_script=scripts.recovery_script,
        dependencies=scripts.dependencies,
        provenance_id=attempt.provenance_id,
        stage_flags=attempt.stage_flags,
    )


def portability_validate(
    factory: SandboxFactory,
    variant: TechniqueVariant,
    *,
    rng: random.Random,
    dir_name: str | None = None,
) -> Verdict:
    """Stage 4: re-run the pair against a fresh directory with a fresh flag.

    plant must exit zero, a scan for the new flag must find nothing, and
    recovery must print the new flag on stdout and exit zero. This closes the
    inlining failure mode: a variant carrying the original directory or flag
    cannot satisfy the fresh pair.
    """
    flag = gen_flag(rng)
    logical_dir = "/tmp/" + (dir_name or f"probe-{rng.getrandbits(32):08x}")
    sb = factory.create()
    try:
        physical_dir = sb.ensure_dir(logical_dir)
        plant = sb.exec_script(
            variant.plant_script, [physical_dir, flag], cwd=physical_dir
        )
        if plant.exit_code != 0:
            return Verdict(False, "plant-exit")
        if sb.scan_for_flag(flag).occurrences > 0:
            return Verdict(False, "plaintext-on-disk")
        recovery = sb.exec_script(
            variant.recovery_script, [physical_dir], cwd=physical_dir
        )
        if recovery.exit_code != 0:
            return Verdict(False, "recovery-exit")
        if flag not in recovery.stdout_text:
            return Verdict(False, "recovery-mismatch")
        return Verdict(True)
    finally:
        factory.destroy(sb)


@dataclass(frozen=True)
class FunnelReport:
    """Per-stage survivor counts with cumulative rates against raw attempts."""

    raw: int
    explored: int
    verified: int
    synthesized: int
    portable: int
    deduped: int | None = None

    def cumulative(self, count: int) -> float:
        return round(count / self.raw * 100, 1) if self.raw else 0.0

    def rows(self) -> list[tuple[str, int, float]]:
        rows = [
            ("stage1-exploration", self.explored, self.cumulative(self.explored)),
            ("stage2-mechanical", self.verified, self.cumulative(self.verified)),
            ("stage3-synthesis", self.synthesized, self.cumulative(self.synthesized)),
            ("stage4-portability", self.portable, self.cumulative(self.portable)),
        ]
        if self.deduped is not None:
            rows.append(("stage5-dedup", self.deduped, self.cumulative(self.deduped)))
        return rows

    def to_dict(self) -> dict[str, Any]:
        return {
            "raw": self.raw,
            "stages": [
                {"stage": name, "survivors": count, "cumulative_pct": pct}
                for name, count, pct in self.rows()
            ],
        }

    def format_table(self) -> str:
        lines = [f"{'stage':<22}{'survivors':>10}{'cumulative':>12}"]
        for name, count, pct in self.rows():
            lines.append(f"{name:<22}{count:>10}{pct:>11.1f}%")
        return "\n".join(lines)


def run_funnel(
    attempts: Iterable[HarvestAttempt], deduped: int | None = None
) -> FunnelReport:
    """Fold stage flags into the survival funnel.

    Counted hierarchically (a stage-k survivor must have survived every
    earlier stage), so the funnel is monotone for any input set.
    """
    raw = explored = verified = synthesized = portable = 0
    for attempt in attempts:
        raw += 1
        f = attempt.stage_flags
        if not f.explored:
            continue
        explored += 1
        if not f.mechanically_verified:
            continue
        verified += 1
        if not f.synthesized:
            continue
        synthesized += 1
        if f.portable:
            portable += 1
    return FunnelReport(raw, explored, verified, synthesized, portable, deduped)


@dataclass(frozen=True)
class HarvestRunResult:
    report: FunnelReport
    attempts: tuple[HarvestAttempt, ...]
    retained: dict[str, int]


def run_harvest(
    recordings: Sequence[Recording],
    library_root: Path,
    factory: SandboxFactory,
    *,
    seed: int = 0,
    threshold: float = 0.85,
    max_turns: int = DEFAULT_MAX_TURNS,
    synthesizer: Synthesizer | None = None,
) -> HarvestRunResult:
    """Stages 1-5 end to end over replay recordings.

    Each recording gets a fresh sandbox, directory, and flag. Attempt records
    are archived to the library's JSONL stream; stage-4 survivors are
    canonicalized per technique id and saved.
    """
    synth = synthesizer or TemplateSynthesizer()
    rng = random.Random(seed)
    attempts: list[HarvestAttempt] = []
    survivors: dict[str, list[TechniqueVariant]] = {}
    families: dict[str, str | None] = {}
    for index, recording in enumerate(recordings):
        tid = recording.technique_id
        families.setdefault(tid, recording.family)
        flag = gen_flag(rng)
        original_dir = f"/tmp/harvest-{rng.getrandbits(32):08x}"
        provenance = f"{tid}-{seed}-{index:03d}"
        sb = factory.create(seed=seed)
        try:
            attempt = run_exploration(
                ReplayExplorer(recording),
                sb,
                tid,
                flag,
                original_dir=original_dir,
                provenance_id=provenance,
                max_turns=max_turns,
            )
            if attempt.stage_flags.explored:
                mechanical_verify(sb, attempt)
        finally:
            factory.destroy(sb)
        if attempt.stage_flags.mechanically_verified:
            variant = synthesize(synth, attempt)
            if portability_validate(factory, variant, rng=rng):
                attempt.stage_flags = replace(attempt.stage_flags, portable=True)
                survivors.setdefault(tid, []).append(mark_portable(variant))
        append_attempt(library_root, tid, attempt.to_record())
        attempts.append(attempt)
    retained: dict[str, int] = {}
    for tid, variants in sorted(survivors.items()):
        kept = canonicalize(variants, threshold)
        save_technique(
            library_root, Technique(id=tid, variants=tuple(kept), family=families[tid])
        )
        retained[tid] = len(kept)
    report = run_funnel(attempts)
    return HarvestRunResult(report, tuple(attempts), retained)
