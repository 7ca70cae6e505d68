"""Environment generation: determinism, role dressing, and the carried-over
bidirectional contract (recoverable, invisible, no plant residue)."""

from __future__ import annotations

import pytest

from flagcraft.envgen import (
    TARGET_BASE_DIRS,
    MultiFlagEnv,
    apply_role_dressing,
    generate_env,
)
from flagcraft.errors import ConfigError, EnvConstructionError
from flagcraft.flags import is_flag
from flagcraft.library import Technique, TechniqueVariant
from flagcraft.roles import ROLE_NAMES, ROLE_TEMPLATES, render_role

from .exemplars import install_fixture_library


@pytest.fixture(scope="module")
def fixture_library(tmp_path_factory, request):
    xattr_workdir = request.getfixturevalue("xattr_workdir")
    root = tmp_path_factory.mktemp("library")
    exclude = () if xattr_workdir is not None else ("xattr",)
    return install_fixture_library(root, exclude=exclude)


def _destroy(env: MultiFlagEnv, factory) -> None:
    factory.destroy(env.sandbox)


def test_generate_env_manifest_shape(local_factory, fixture_library):
    ids = sorted(fixture_library)[:8]
    env = generate_env(fixture_library, ids, seed=7, role=None, factory=local_factory)
    try:
        assert len(env.planted) == 8
        assert len(set(env.flags)) == 8
        assert all(is_flag(f) for f in env.flags)
        assert all(p.plant_exit == 0 for p in env.planted)
        for planted in env.planted:
            base = planted.target_dir.rsplit("/", 1)[0]
            assert base in TARGET_BASE_DIRS
        manifest = env.manifest()
        assert set(manifest) == {"sandbox_handle", "seed", "role", "planted"}
        assert set(manifest["planted"][0]) == {
            "technique_id", "variant_index", "target_dir", "flag", "points",
            "plant_exit",
        }
    finally:
        _destroy(env, local_factory)


def test_generate_env_is_deterministic_modulo_handle(local_factory, fixture_library):
    ids = sorted(fixture_library)[:8]
    first = generate_env(fixture_library, ids, seed=42, role="webserver",
                         factory=local_factory)
    manifest_a = first.manifest()
    _destroy(first, local_factory)
    second = generate_env(fixture_library, ids, seed=42, role="webserver",
                          factory=local_factory)
    manifest_b = second.manifest()
    _destroy(second, local_factory)
    manifest_a.pop("sandbox_handle")
    manifest_b.pop("sandbox_handle")
    assert manifest_a == manifest_b


def test_generate_env_different_seed_changes_draws(local_factory, fixture_library):
    ids = sorted(fixture_library)[:8]
    a = generate_env(fixture_library, ids, seed=1, factory=local_factory)
    flags_a = a.flags
    _destroy(a, local_factory)
    b = generate_env(fixture_library, ids, seed=2, factory=local_factory)
    flags_b = b.flags
    _destroy(b, local_factory)
    assert flags_a != flags_b


def test_scan_finds_nothing_after_generation(local_factory, fixture_library):
    ids = sorted(fixture_library)[:8]
    env = generate_env(fixture_library, ids, seed=11, role="database",
                       factory=local_factory)
    try:
        for flag in env.flags:
            assert env.sandbox.scan_for_flag(flag).occurrences == 0
    finally:
        _destroy(env, local_factory)


def test_recoverability_of_every_planted_flag(local_factory, fixture_library):
    ids = sorted(fixture_library)[:8]
    env = generate_env(fixture_library, ids, seed=13, factory=local_factory)
    try:
        for planted in env.planted:
            technique = fixture_library[planted.technique_id]
            variant = technique.variants[planted.variant_index]
            physical = env.sandbox.map_path(planted.target_dir)
            result = env.sandbox.exec_script(
                variant.recovery_script, [physical], cwd=physical
            )
            assert result.exit_code == 0, (planted.technique_id, result.stderr_text)
            assert planted.flag in result.stdout_text
    finally:
        _destroy(env, local_factory)


def test_no_plant_script_residue(local_factory, fixture_library):
    # distinctive plant body text must not survive anywhere in the sandbox
    from flagcraft.sandbox import scan_tree

    ids = sorted(fixture_library)[:8]
    env = generate_env(fixture_library, ids, seed=17, factory=local_factory)
    try:
        for planted in env.planted:
            variant = fixture_library[planted.technique_id].variants[
                planted.variant_index
            ]
            marker = variant.plant_script.splitlines()[2]
            result = scan_tree(env.sandbox.root, marker.encode())
            assert result.occurrences == 0, (planted.technique_id, marker)
    finally:
        _destroy(env, local_factory)


def test_plant_failure_aborts_construction(local_factory, tmp_path):
    from flagcraft.library import save_technique

    broken = Technique(
        id="t_broken",
        variants=(
            TechniqueVariant(
                plant_script="exit 1\n",
                recovery_script="true\n",
                dependencies=(),
                provenance_id="broken-000",
            ),
        ),
    )
    save_technique(tmp_path, broken)
    library = {"t_broken": broken}
    with pytest.raises(EnvConstructionError) as err:
        generate_env(library, ["t_broken"], seed=3, factory=local_factory, n_flags=1)
    assert "t_broken" in str(err.value)


def test_duplicate_ids_rejected(local_factory, fixture_library):
    ids = sorted(fixture_library)[:7]
    with pytest.raises(ConfigError):
        generate_env(
            fixture_library, ids + [ids[0]], seed=3, factory=local_factory
        )


def test_unknown_id_rejected(local_factory, fixture_library):
    ids = sorted(fixture_library)[:7] + ["t_ghost"]
    with pytest.raises(EnvConstructionError):
        generate_env(fixture_library, ids, seed=3, factory=local_factory)


# --- role dressing ------------------------------------------------------------


def test_webserver_dressing_writes_nginx_and_crontab(local_factory):
    sb = local_factory.create()
    apply_role_dressing(sb, "webserver", seed=5)
    nginx = sb.map_path("/etc/nginx/nginx.conf")
    crontab = sb.map_path("/var/spool/cron/crontabs/www-data")
    assert open(nginx).read().startswith("user www-data;")
    assert "rotate-sessions" in open(crontab).read()
    local_factory.destroy(sb)


def test_dressing_none_writes_nothing(local_factory):
    sb = local_factory.create()
    apply_role_dressing(sb, None, seed=5)
    assert list(sb.root.iterdir()) == []
    local_factory.destroy(sb)


def test_dressing_unknown_role_is_config_error(local_factory):
    sb = local_factory.create()
    with pytest.raises(ConfigError):
        apply_role_dressing(sb, "mainframe", seed=5)
    local_factory.destroy(sb)


def test_dressing_idempotent_per_role_and_seed():
    assert render_role("monitoring", 9) == render_role("monitoring", 9)
    assert render_role("monitoring", 9) != render_role("monitoring", 10)


def test_all_role_templates_render_without_flag_substring():
    for role in ROLE_NAMES:
        for seed in (0, 1, 99):
            for path, content in render_role(role, seed).items():
                assert b"flag{" not in content, (role, path)


def test_role_templates_cover_all_seven_roles():
    assert set(ROLE_TEMPLATES) == set(ROLE_NAMES)
    assert len(ROLE_NAMES) == 7


def test_dressing_precedes_planting_and_contains_no_env_flag(
    local_factory, fixture_library
):
    ids = sorted(fixture_library)[:8]
    env = generate_env(
        fixture_library, ids, seed=23, role="gateway", factory=local_factory
    )
    try:
        log = env.sandbox.map_path("/var/log/haproxy.log")
        content = open(log, "rb").read()
        for flag in env.flags:
            assert flag.encode() not in content
    finally:
        _destroy(env, local_factory)
