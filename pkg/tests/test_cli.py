"""CLI contract: exit codes, JSON schemas, redaction, determinism."""

from __future__ import annotations

import json

import pytest

from flagcraft.cli import main
from flagcraft.library import load_manifest

from .exemplars import install_fixture_library, load_exemplars, make_recording


@pytest.fixture()
def cli_env(tmp_path, sandbox_workdir, shim_dir, monkeypatch):
    """Config file + library root wired to the capability-probed workdir."""
    config_path = tmp_path / "config.json"
    config_path.write_text(
        json.dumps(
            {
                "library_root": str(tmp_path / "library"),
                "backend": "local-dir",
                "workdir": str(sandbox_workdir),
            }
        )
    )
    monkeypatch.setenv("PATH", f"{shim_dir}:" + __import__("os").environ["PATH"])
    return tmp_path, str(config_path)


@pytest.fixture()
def populated_library(cli_env, xattr_workdir):
    tmp_path, config_path = cli_env
    root = tmp_path / "library"
    exclude = () if xattr_workdir is not None else ("xattr",)
    techniques = install_fixture_library(root, exclude=exclude)
    return tmp_path, config_path, root, techniques


def test_stats_wilson_prints_reported_interval(capsys):
    assert main(["stats", "wilson", "8", "30"]) == 0
    assert capsys.readouterr().out.strip() == "0.142 0.444"


def test_stats_wilson_json_round_trips(capsys):
    assert main(["--json", "stats", "wilson", "20", "30"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["wilson_low"] == pytest.approx(0.488, abs=1e-3)
    assert payload["wilson_high"] == pytest.approx(0.808, abs=1e-3)


def test_stats_fisher_prints_p_value(capsys):
    assert main(["stats", "fisher", "8", "22", "20", "10"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(0.0040, abs=1e-3)


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["stats", "wilson", "eight", "30"])
    assert exc.value.code == 2


def test_unknown_config_key_exits_2(tmp_path, capsys):
    config = tmp_path / "c.json"
    config.write_text('{"mystery_key": 1}')
    assert main(["--config", str(config), "stats", "wilson", "1", "2"]) == 2
    assert "mystery_key" in capsys.readouterr().err


def test_funnel_reproduces_table(capsys):
    code = main(["funnel", "--counts", "750,712,700,693,656", "--deduped", "441"])
    assert code == 0
    out = capsys.readouterr().out
    assert "87.5%" in out and "58.8%" in out


def test_funnel_json_schema(capsys):
    main(["--json", "funnel", "--counts", "750,712,700,693,656,441"])
    payload = json.loads(capsys.readouterr().out)
    assert payload["raw"] == 750
    assert [s["survivors"] for s in payload["stages"]] == [712, 700, 693, 656, 441]


def test_validate_single_technique_pass(populated_library, capsys):
    _, config_path, root, _ = populated_library
    code = main(
        ["--config", config_path, "validate", "--technique", "mtime_pre_epoch"]
    )
    assert code == 0
    assert "pass" in capsys.readouterr().out


def test_validate_all_exit_codes(populated_library, capsys):
    _, config_path, root, _ = populated_library
    assert main(["--config", config_path, "validate", "--all"]) == 0


def test_validate_failure_exits_1(populated_library, capsys, tmp_path):
    from flagcraft.library import Technique, TechniqueVariant, save_technique

    _, config_path, root, _ = populated_library
    save_technique(
        root,
        Technique(
            id="t_always_fails",
            variants=(
                TechniqueVariant(
                    plant_script="exit 1\n",
                    recovery_script="true\n",
                    dependencies=(),
                    provenance_id="fail-000",
                ),
            ),
        ),
    )
    code = main(["--config", config_path, "validate", "--technique", "t_always_fails"])
    assert code == 1
    assert "FAIL" in capsys.readouterr().out


def test_dedup_drops_duplicate_variants(populated_library, capsys):
    from dataclasses import replace

    from flagcraft.library import Technique, load_library, save_technique

    _, config_path, root, techniques = populated_library
    tid = "t_b64_file"
    original = techniques[tid].variants[0]
    doubled = Technique(
        id=tid,
        variants=(original, replace(original, provenance_id="dupe-001")),
    )
    save_technique(root, doubled)
    assert load_manifest(root)[tid] == 2
    assert main(["--config", config_path, "dedup", "--threshold", "0.85"]) == 0
    assert load_manifest(root)[tid] == 1
    assert len(load_library(root)[tid].variants) == 1


def test_gen_env_writes_manifest_and_redacts_stdout(populated_library, capsys, tmp_path):
    _, config_path, root, techniques = populated_library
    ids = ",".join(sorted(techniques)[:8])
    out_path = tmp_path / "manifest.json"
    code = main(
        [
            "--config", config_path, "gen-env", "--ids", ids, "--seed", "7",
            "--role", "webserver", "--manifest-out", str(out_path),
        ]
    )
    assert code == 0
    stdout = capsys.readouterr().out
    assert "flag{[redacted]}" in stdout
    manifest = json.loads(out_path.read_text())
    assert len(manifest["planted"]) == 8
    assert all("[redacted]" not in p["flag"] for p in manifest["planted"])
    assert manifest["role"] == "webserver"


def test_gen_env_reveal_flags_opt_in(populated_library, capsys):
    _, config_path, root, techniques = populated_library
    ids = ",".join(sorted(techniques)[:8])
    main(
        ["--config", config_path, "--reveal-flags", "--json", "gen-env",
         "--ids", ids, "--seed", "7"]
    )
    payload = json.loads(capsys.readouterr().out)
    assert all(p["flag"].startswith("flag{") for p in payload["planted"])
    assert all("redacted" not in p["flag"] for p in payload["planted"])


def test_gen_env_deterministic_manifest(populated_library, capsys, tmp_path):
    _, config_path, root, techniques = populated_library
    ids = ",".join(sorted(techniques)[:8])
    manifests = []
    for run in range(2):
        out = tmp_path / f"m{run}.json"
        main(
            ["--config", config_path, "gen-env", "--ids", ids, "--seed", "21",
             "--manifest-out", str(out)]
        )
        data = json.loads(out.read_text())
        data.pop("sandbox_handle")
        manifests.append(data)
    assert manifests[0] == manifests[1]


def test_run_episode_oracle_via_cli(populated_library, capsys, tmp_path):
    _, config_path, root, techniques = populated_library
    ids = ",".join(sorted(techniques)[:8])
    transcript = tmp_path / "ep.jsonl"
    code = main(
        ["--config", config_path, "--json", "run-episode", "--ids", ids,
         "--seed", "3", "--agent", "oracle", "--transcript-out", str(transcript)]
    )
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["turns_used"] == 16
    assert len(payload["found"]) == 8
    assert payload["reward"] == 8 * 15 - 16
    assert len(transcript.read_text().splitlines()) == 16


def test_schedule_sim_coverage(capsys, tmp_path):
    checkpoint = tmp_path / "pool.json"
    code = main(
        ["--json", "schedule-sim", "--n-ids", "155", "--batches", "40",
         "--seed", "5", "--checkpoint", str(checkpoint)]
    )
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["coverage"] >= 0.8
    saved = json.loads(checkpoint.read_text())
    assert set(saved) == {"pool", "stats", "rng_state", "config"}
    assert len(saved["pool"]) == 50


def test_holdout_csv_and_aggregate(populated_library, capsys, tmp_path):
    _, config_path, root, techniques = populated_library
    csv_out = tmp_path / "holdout.csv"
    code = main(
        ["--config", config_path, "holdout",
         "--techniques", "t_b64_file,t_rot13_file", "--trials", "3",
         "--agent", "oracle", "--seed", "2", "--csv-out", str(csv_out)]
    )
    assert code == 0
    lines = csv_out.read_text().strip().splitlines()
    assert lines[0].split(",")[:3] == ["technique_id", "successes", "trials"]
    aggregate = lines[-1].split(",")
    assert aggregate[0] == "aggregate"
    assert aggregate[1] == "6" and aggregate[2] == "6"  # oracle solves all


def test_funnel_json_matches_golden_file(capsys):
    from .conftest import REPO_ROOT

    main(["--json", "funnel", "--counts", "750,712,700,693,656,441"])
    golden = (REPO_ROOT / "tests" / "data" / "golden" / "funnel.json").read_text()
    assert capsys.readouterr().out == golden


def test_wilson_json_matches_golden_file(capsys):
    from .conftest import REPO_ROOT

    main(["--json", "stats", "wilson", "8", "30"])
    golden = (REPO_ROOT / "tests" / "data" / "golden" / "wilson_8_30.json").read_text()
    assert capsys.readouterr().out == golden


def test_harvest_cli_end_to_end(cli_env, xattr_workdir, capsys, tmp_path):
    _, config_path = cli_env
    recordings_dir = tmp_path / "recordings"
    recordings_dir.mkdir()
    from .exemplars import exemplar_runnable_locally

    count = 0
    for ex in load_exemplars():
        if not exemplar_runnable_locally(ex, xattr_ok=xattr_workdir is not None):
            continue
        recording = make_recording(ex)
        (recordings_dir / f"{ex.id}.json").write_text(
            json.dumps(recording.to_dict())
        )
        count += 1
    library_root = tmp_path / "harvested"
    code = main(
        ["--config", config_path, "--json", "harvest",
         "--recordings", str(recordings_dir), "--library", str(library_root),
         "--seed", "11"]
    )
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["funnel"]["raw"] == count
    assert payload["funnel"]["stages"][3]["survivors"] == count
    assert load_manifest(library_root) == {tid: 1 for tid in payload["retained"]}
