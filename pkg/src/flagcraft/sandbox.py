"""Execution substrate for plant/recovery scripts.

Two backends behind one interface: an isolated container driven through the
host runtime CLI (run/exec/rm verbs), and a local temporary-directory backend
for fast desk-scale tests. Scripts are transferred content-encoded (base64)
and decoded inside the sandbox, so no shell-quoting hazards apply and the
transferred copy is removed before the call returns.

The local backend scopes execution and scanning under its root directory and
maps logical absolute paths (``/var/tmp/x``) beneath it; the container backend
uses logical paths as-is and scans from ``/`` minus the exclusion set.
"""

from __future__ import annotations

import base64
import json
import os
import shutil
import subprocess
import tempfile
import threading
import time
import uuid
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import SandboxCapacityError, SandboxExecutionError, SandboxSetupError

RUNTIME_ENV_VAR = "FLAGCRAFT_RUNTIME"

DEFAULT_SCAN_EXCLUDE = ("/proc", "/sys", "/dev")
DEFAULT_TIMEOUT = 60.0
DEFAULT_OUTPUT_CAP = 1 << 20  # 1 MiB per stream
DEFAULT_MAX_LIVE = 8

# Decodes $1 into a temp file inside the sandbox, runs it with the remaining
# args, and removes the copy before propagating the exit status.
_TRANSFER_BOOTSTRAP = (
    'set -e; tmp=$(mktemp "${TMPDIR:-/tmp}/.xfer.XXXXXXXX"); '
    'printf %s "$1" | base64 -d > "$tmp"; shift; set +e; '
    'bash "$tmp" "$@"; rc=$?; rm -f "$tmp"; exit $rc'
)

_WRITE_FILE_SCRIPT = 'mkdir -p "$(dirname "$1")"\nprintf %s "$2" | base64 -d {op} "$1"\n'

# Standalone scanner run inside a container; mirrors scan_tree() semantics.
_CONTAINER_SCAN_SCRIPT = """\
exec python3 - "$1" "$2" "$3" <<'PYSCAN'
import json, os, sys

needle = sys.argv[1].encode()
root = sys.argv[2]
exclude = [p for p in sys.argv[3].split(":") if p]
occurrences = files_scanned = skipped = 0

def on_error(err):
    global skipped
    skipped += 1

for dirpath, dirnames, filenames in os.walk(root, onerror=on_error):
    pruned = []
    for name in list(dirnames):
        full = os.path.join(dirpath, name)
        if any(full == ex or full.startswith(ex + "/") for ex in exclude):
            dirnames.remove(name)
            continue
        occurrences += os.fsencode(name).count(needle)
    for name in filenames:
        occurrences += os.fsencode(name).count(needle)
        full = os.path.join(dirpath, name)
        if os.path.islink(full):
            continue
        try:
            with open(full, "rb") as fh:
                occurrences += fh.read().count(needle)
            files_scanned += 1
        except OSError:
            skipped += 1

print(json.dumps({"occurrences": occurrences,
                  "files_scanned": files_scanned,
                  "skipped": skipped}))
PYSCAN
"""


@dataclass(frozen=True)
class ExecResult:
    """Outcome of one script execution. Non-zero exit is data, not an error."""

    exit_code: int
    stdout: bytes
    stderr: bytes
    duration: float
    truncated: bool = False

    @property
    def stdout_text(self) -> str:
        return self.stdout.decode("utf-8", errors="replace")

    @property
    def stderr_text(self) -> str:
        return self.stderr.decode("utf-8", errors="replace")


@dataclass(frozen=True)
class ScanResult:
    """Literal byte-sequence occurrences under the scan root.

    Covers regular-file contents and file/directory names; never decodes
    encodings. Unreadable entries are skipped and counted, never fatal.
    """

    occurrences: int
    files_scanned: int
    skipped: int


@dataclass(frozen=True)
class SandboxConfig:
    backend: str = "local-dir"
    workdir: Path | None = None
    image: str = "ctf-base:dev"
    runtime: str | None = None
    scan_exclude: tuple[str, ...] = DEFAULT_SCAN_EXCLUDE
    timeout: float = DEFAULT_TIMEOUT
    output_cap: int = DEFAULT_OUTPUT_CAP
    extra_path: tuple[str, ...] = ()
    max_live: int = DEFAULT_MAX_LIVE

    def resolved_runtime(self) -> str:
        return self.runtime or os.environ.get(RUNTIME_ENV_VAR, "docker")


def scan_tree(root: Path, needle: bytes, exclude: Iterable[str] = ()) -> ScanResult:
    """Count occurrences of ``needle`` in contents and names under ``root``."""
    exclude = [os.path.normpath(str(p)) for p in exclude]
    occurrences = files_scanned = skipped = 0

    def excluded(path: str) -> bool:
        return any(path == ex or path.startswith(ex + os.sep) for ex in exclude)

    def on_error(err: OSError) -> None:
        nonlocal skipped
        skipped += 1

    for dirpath, dirnames, filenames in os.walk(root, onerror=on_error):
        for name in list(dirnames):
            full = os.path.join(dirpath, name)
            if excluded(full):
                dirnames.remove(name)
                continue
            occurrences += os.fsencode(name).count(needle)
        for name in filenames:
            occurrences += os.fsencode(name).count(needle)
            full = os.path.join(dirpath, name)
            if os.path.islink(full):
                continue
            try:
                with open(full, "rb") as fh:
                    occurrences += fh.read().count(needle)
                files_scanned += 1
            except OSError:
                skipped += 1
    return ScanResult(occurrences, files_scanned, skipped)


def _truncate(data: bytes, cap: int) -> tuple[bytes, bool]:
    if len(data) > cap:
        return data[:cap], True
    return data, False


class Sandbox(ABC):
    """One isolated filesystem scope, live until destroyed."""

    backend: str

    def __init__(self, handle: str, config: SandboxConfig) -> None:
        self.handle = handle
        self.config = config
        self.created_at = time.time()
        self.alive = True
        self.exec_count = 0

    @abstractmethod
    def map_path(self, logical: str) -> str:
        """Physical location of a logical absolute path inside this sandbox."""

    @abstractmethod
    def ensure_dir(self, logical: str) -> str:
        """Create a directory (and parents) at a logical path; returns physical."""

    @abstractmethod
    def exec_script(
        self,
        script: str,
        args: Sequence[str] = (),
        *,
        cwd: str | None = None,
        timeout: float | None = None,
    ) -> ExecResult:
        """Transfer ``script`` content-encoded, run it with ``args``, clean up."""

    @abstractmethod
    def write_file(self, logical: str, content: bytes, *, append: bool = False) -> None:
        """Place ``content`` at a logical path inside the sandbox."""

    @abstractmethod
    def scan_for_flag(self, flag: str) -> ScanResult:
        """Pure function of filesystem state: literal occurrences of ``flag``."""

    @abstractmethod
    def destroy(self) -> None:
        """Release all resources; idempotent."""


class LocalDirSandbox(Sandbox):
    """Temporary-directory backend; everything is scoped under ``root``."""

    backend = "local-dir"

    def __init__(self, handle: str, config: SandboxConfig) -> None:
        super().__init__(handle, config)
        parent = Path(config.workdir) if config.workdir else Path(tempfile.gettempdir())
        parent.mkdir(parents=True, exist_ok=True)
        self.root = parent / handle
        self.root.mkdir()

    def map_path(self, logical: str) -> str:
        mapped = os.path.normpath(str(self.root / logical.lstrip("/")))
        if os.path.commonpath([mapped, str(self.root)]) != str(self.root):
            raise SandboxExecutionError(f"path {logical!r} escapes sandbox root")
        return mapped

    def ensure_dir(self, logical: str) -> str:
        physical = self.map_path(logical)
        os.makedirs(physical, exist_ok=True)
        return physical

    def _env(self) -> dict[str, str]:
        env = dict(os.environ)
        if self.config.extra_path:
            env["PATH"] = ":".join(
                [*self.config.extra_path, env.get("PATH", os.defpath)]
            )
        env["HOME"] = str(self.root)
        env["TMPDIR"] = str(self.root)
        return env

    def exec_script(
        self,
        script: str,
        args: Sequence[str] = (),
        *,
        cwd: str | None = None,
        timeout: float | None = None,
    ) -> ExecResult:
        if not script:
            raise SandboxExecutionError("script must be non-empty")
        self.exec_count += 1
        encoded = base64.b64encode(script.encode()).decode("ascii")
        argv = ["bash", "-c", _TRANSFER_BOOTSTRAP, "xfer", encoded, *args]
        started = time.monotonic()
        try:
            proc = subprocess.run(
                argv,
                cwd=cwd or str(self.root),
                env=self._env(),
                capture_output=True,
                timeout=timeout if timeout is not None else self.config.timeout,
            )
        except subprocess.TimeoutExpired as exc:
            raise SandboxExecutionError(
                f"script timed out after {exc.timeout:.0f}s in {self.handle}"
            ) from exc
        duration = time.monotonic() - started
        stdout, t_out = _truncate(proc.stdout, self.config.output_cap)
        stderr, t_err = _truncate(proc.stderr, self.config.output_cap)
        return ExecResult(proc.returncode, stdout, stderr, duration, t_out or t_err)

    def write_file(self, logical: str, content: bytes, *, append: bool = False) -> None:
        physical = Path(self.map_path(logical))
        physical.parent.mkdir(parents=True, exist_ok=True)
        with open(physical, "ab" if append else "wb") as fh:
            fh.write(content)

    def scan_for_flag(self, flag: str) -> ScanResult:
        exclude = [self.map_path(p) for p in self.config.scan_exclude]
        return scan_tree(self.root, flag.encode(), exclude)

    def destroy(self) -> None:
        if not self.alive:
            return
        self.alive = False
        shutil.rmtree(self.root, ignore_errors=True)


class ContainerSandbox(Sandbox):
    """Container backend shelling out to the host runtime CLI."""

    backend = "container"

    def __init__(self, handle: str, config: SandboxConfig) -> None:
        super().__init__(handle, config)
        self.runtime = config.resolved_runtime()
        self.root = "/"
        proc = subprocess.run(
            [self.runtime, "run", "-d", "--name", handle, config.image,
             "sleep", "infinity"],
            capture_output=True,
        )
        if proc.returncode != 0:
            raise SandboxSetupError(
                f"{self.runtime} run failed for image {config.image!r}: "
                f"{proc.stderr.decode(errors='replace').strip()}"
            )

    def map_path(self, logical: str) -> str:
        return logical

    def ensure_dir(self, logical: str) -> str:
        result = self.exec_script('mkdir -p "$1"', [logical])
        if result.exit_code != 0:
            raise SandboxExecutionError(
                f"mkdir {logical!r} failed in {self.handle}: {result.stderr_text}"
            )
        return logical

    def exec_script(
        self,
        script: str,
        args: Sequence[str] = (),
        *,
        cwd: str | None = None,
        timeout: float | None = None,
    ) -> ExecResult:
        if not script:
            raise SandboxExecutionError("script must be non-empty")
        self.exec_count += 1
        encoded = base64.b64encode(script.encode()).decode("ascii")
        argv = [
            self.runtime, "exec", "-w", cwd or "/root", self.handle,
            "bash", "-c", _TRANSFER_BOOTSTRAP, "xfer", encoded, *args,
        ]
        started = time.monotonic()
        try:
            proc = subprocess.run(
                argv,
                capture_output=True,
                timeout=timeout if timeout is not None else self.config.timeout,
            )
        except subprocess.TimeoutExpired as exc:
            raise SandboxExecutionError(
                f"script timed out after {exc.timeout:.0f}s in {self.handle}"
            ) from exc
        duration = time.monotonic() - started
        stdout, t_out = _truncate(proc.stdout, self.config.output_cap)
        stderr, t_err = _truncate(proc.stderr, self.config.output_cap)
        return ExecResult(proc.returncode, stdout, stderr, duration, t_out or t_err)

    def write_file(self, logical: str, content: bytes, *, append: bool = False) -> None:
        script = _WRITE_FILE_SCRIPT.format(op=">>" if append else ">")
        encoded = base64.b64encode(content).decode("ascii")
        result = self.exec_script(script, [logical, encoded])
        if result.exit_code != 0:
            raise SandboxExecutionError(
                f"write to {logical!r} failed in {self.handle}: {result.stderr_text}"
            )

    def scan_for_flag(self, flag: str) -> ScanResult:
        result = self.exec_script(
            _CONTAINER_SCAN_SCRIPT,
            [flag, self.root, ":".join(self.config.scan_exclude)],
        )
        if result.exit_code != 0:
            raise SandboxExecutionError(
                f"scan failed in {self.handle}: {result.stderr_text}"
            )
        data = json.loads(result.stdout_text.strip().splitlines()[-1])
        return ScanResult(data["occurrences"], data["files_scanned"], data["skipped"])

    def destroy(self) -> None:
        if not self.alive:
            return
        self.alive = False
        subprocess.run(
            [self.runtime, "rm", "-f", self.handle],
            capture_output=True,
        )


@dataclass
class SandboxFactory:
    """Creates sandboxes under a live-count cap; tracks them for cleanup."""

    config: SandboxConfig = field(default_factory=SandboxConfig)

    def __post_init__(self) -> None:
        self._slots = threading.BoundedSemaphore(self.config.max_live)
        self._live: dict[str, Sandbox] = {}
        self._lock = threading.Lock()

    def create(self, seed: int | None = None) -> Sandbox:
        if not self._slots.acquire(blocking=False):
            raise SandboxCapacityError(
                f"live sandbox cap {self.config.max_live} reached"
            )
        handle = f"fc-{seed if seed is not None else 'x'}-{uuid.uuid4().hex[:8]}"
        try:
            if self.config.backend == "local-dir":
                sandbox: Sandbox = LocalDirSandbox(handle, self.config)
            elif self.config.backend == "container":
                sandbox = ContainerSandbox(handle, self.config)
            else:
                raise SandboxSetupError(
                    f"unknown sandbox backend {self.config.backend!r}"
                )
        except BaseException:
            self._slots.release()
            raise
        with self._lock:
            self._live[handle] = sandbox
        return sandbox

    def destroy(self, sandbox: Sandbox) -> None:
        with self._lock:
            tracked = self._live.pop(sandbox.handle, None)
        sandbox.destroy()
        if tracked is not None:
            self._slots.release()

    def destroy_all(self) -> None:
        with self._lock:
            live = list(self._live.values())
        for sandbox in live:
            self.destroy(sandbox)

    def sandbox(self, seed: int | None = None) -> Iterator[Sandbox]:
        """Context-manager variant of create/destroy."""
        return _SandboxContext(self, seed)  # type: ignore[return-value]


class _SandboxContext:
    def __init__(self, factory: SandboxFactory, seed: int | None) -> None:
        self._factory = factory
        self._seed = seed
        self._sandbox: Sandbox | None = None

    def __enter__(self) -> Sandbox:
        self._sandbox = self._factory.create(self._seed)
        return self._sandbox

    def __exit__(self, *exc_info: object) -> None:
        if self._sandbox is not None:
            self._factory.destroy(self._sandbox)
