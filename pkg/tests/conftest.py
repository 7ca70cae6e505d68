"""Shared fixtures: capability probes, tool shims, sandbox factories.

The local backend needs a few capabilities the host may lack: user xattrs on
the workdir filesystem, and the attr/xxd binaries. Probes pick an
xattr-capable workdir (falling back to /dev/shm, which is tmpfs) and generate
python-backed shims for missing tools so the exemplar scripts run verbatim.
"""

from __future__ import annotations

import os
import shutil
import stat
import subprocess
import tempfile
from pathlib import Path

import pytest

from flagcraft.sandbox import SandboxConfig, SandboxFactory

REPO_ROOT = Path(__file__).resolve().parent.parent
TECHNIQUE_FIXTURES = REPO_ROOT / "fixtures" / "techniques"

_XXD_SHIM = """\
#!/usr/bin/env python3
import sys
args = sys.argv[1:]
data = sys.stdin.buffer.read()
if args == ["-p"]:
    h = data.hex()
    sys.stdout.write("".join(h[i:i + 60] + "\\n" for i in range(0, len(h), 60)))
elif args in (["-r", "-p"], ["-p", "-r"]):
    sys.stdout.buffer.write(bytes.fromhex("".join(data.decode().split())))
else:
    sys.exit("xxd shim: unsupported args: %r" % (args,))
"""

_SETFATTR_SHIM = """\
#!/usr/bin/env python3
import os, sys
a = sys.argv[1:]
os.setxattr(a[-1], a[a.index("-n") + 1], a[a.index("-v") + 1].encode())
"""

_GETFATTR_SHIM = """\
#!/usr/bin/env python3
import os, sys
a = sys.argv[1:]
name, path = a[a.index("-n") + 1], a[-1]
value = os.getxattr(path, name)
if "--only-values" in a:
    sys.stdout.buffer.write(value)
else:
    sys.stdout.buffer.write(name.encode() + b'="' + value + b'"\\n')
"""


def _dir_supports_xattr(parent: Path) -> bool:
    try:
        with tempfile.NamedTemporaryFile(dir=parent) as probe:
            os.setxattr(probe.name, "user.flagcraft_probe", b"1")
            return os.getxattr(probe.name, "user.flagcraft_probe") == b"1"
    except OSError:
        return False


def runtime_available() -> bool:
    runtime = os.environ.get("FLAGCRAFT_RUNTIME", "docker")
    return shutil.which(runtime) is not None


@pytest.fixture(scope="session")
def shim_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Directory of python-backed stand-ins for tools missing on this host."""
    shims = tmp_path_factory.mktemp("shims")
    for tool, source in (
        ("xxd", _XXD_SHIM),
        ("setfattr", _SETFATTR_SHIM),
        ("getfattr", _GETFATTR_SHIM),
    ):
        if shutil.which(tool) is None:
            path = shims / tool
            path.write_text(source)
            path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP)
    return shims


@pytest.fixture(scope="session")
def xattr_workdir(tmp_path_factory: pytest.TempPathFactory) -> Path | None:
    """A parent directory whose filesystem accepts user xattrs, if any."""
    default = tmp_path_factory.mktemp("sbx")
    if _dir_supports_xattr(default):
        return default
    shm = Path("/dev/shm")
    if shm.is_dir() and os.access(shm, os.W_OK) and _dir_supports_xattr(shm):
        workdir = shm / f"flagcraft-tests-{os.getpid()}"
        workdir.mkdir(exist_ok=True)
        yield_dir = workdir
        return yield_dir
    return None


@pytest.fixture(scope="session")
def sandbox_workdir(
    xattr_workdir: Path | None, tmp_path_factory: pytest.TempPathFactory
) -> Path:
    return xattr_workdir if xattr_workdir is not None else tmp_path_factory.mktemp("sbx")


@pytest.fixture(scope="session")
def local_config(sandbox_workdir: Path, shim_dir: Path) -> SandboxConfig:
    return SandboxConfig(
        backend="local-dir",
        workdir=sandbox_workdir,
        extra_path=(str(shim_dir),),
        max_live=8,
    )


@pytest.fixture()
def local_factory(local_config: SandboxConfig):
    factory = SandboxFactory(local_config)
    yield factory
    factory.destroy_all()


@pytest.fixture(scope="session", autouse=True)
def _cleanup_shared_segments():
    yield
    # The shm exemplar stores at a fixed path outside any sandbox root.
    try:
        os.remove("/dev/shm/.cache_seg_42")
    except OSError:
        pass
    for leftover in Path("/dev/shm").glob(f"flagcraft-tests-{os.getpid()}"):
        shutil.rmtree(leftover, ignore_errors=True)


def have_tools(*tools: str) -> bool:
    return all(shutil.which(t) is not None for t in tools)


def bash_available() -> bool:
    return shutil.which("bash") is not None


def pre_epoch_mtime_supported(parent: Path) -> bool:
    try:
        with tempfile.NamedTemporaryFile(dir=parent) as probe:
            subprocess.run(
                ["touch", "-d", "1969-06-15 12:00:00", probe.name], check=True
            )
            return os.stat(probe.name).st_mtime < 0
    except (OSError, subprocess.CalledProcessError):
        return False
