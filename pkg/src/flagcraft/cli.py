"""Operator command line.

Subcommands map 1:1 onto module operations and exchange JSON artifacts
between stages. Exit codes: 0 success, 1 verdict failure, 2 usage or config
error. Machine output via --json; flags are redacted on stdout unless
--reveal-flags (files written with --*-out carry real flags, since they are
the artifacts later stages consume).
"""

from __future__ import annotations

import argparse
import json
import random
import signal
import sys
import zlib
from pathlib import Path
from typing import Any

from . import envgen, episode, harvest, library, scheduler, stats
from .config import Config, load_config
from .errors import ConfigError, FlagcraftError
from .flags import redact
from .roles import ROLE_NAMES
from .sandbox import SandboxFactory

_ACTIVE_FACTORIES: list[SandboxFactory] = []


def _factory(config: Config, backend: str | None = None) -> SandboxFactory:
    sandbox_config = config.sandbox_config()
    if backend:
        sandbox_config = type(sandbox_config)(
            **{**sandbox_config.__dict__, "backend": backend}
        )
    factory = SandboxFactory(sandbox_config)
    _ACTIVE_FACTORIES.append(factory)
    return factory


def _emit(args: argparse.Namespace, payload: dict[str, Any], human: str) -> None:
    text = json.dumps(payload, indent=2) if args.json else human
    if not args.reveal_flags:
        text = redact(text)
    print(text)


def _parse_ids(raw: str) -> list[str]:
    return [part.strip() for part in raw.split(",") if part.strip()]


# --- subcommand handlers ------------------------------------------------------


def cmd_stats(args: argparse.Namespace, config: Config) -> int:
    if args.stat == "wilson":
        low, high = stats.wilson_interval(args.successes, args.trials, args.confidence)
        _emit(
            args,
            {
                "successes": args.successes,
                "trials": args.trials,
                "confidence": args.confidence,
                "wilson_low": low,
                "wilson_high": high,
            },
            f"{low:.3f} {high:.3f}",
        )
    else:
        p = stats.fisher_exact_two_sided(args.a, args.b, args.c, args.d)
        _emit(
            args,
            {"table": [args.a, args.b, args.c, args.d], "p_value": p},
            f"{p:.6f}",
        )
    return 0


def cmd_funnel(args: argparse.Namespace, config: Config) -> int:
    counts = [int(x) for x in args.counts.split(",")]
    if len(counts) not in (5, 6):
        raise ConfigError(
            "--counts expects raw,explored,verified,synthesized,portable[,deduped]"
        )
    report = harvest.FunnelReport(
        raw=counts[0],
        explored=counts[1],
        verified=counts[2],
        synthesized=counts[3],
        portable=counts[4],
        deduped=counts[5] if len(counts) == 6 else args.deduped,
    )
    _emit(args, report.to_dict(), report.format_table())
    return 0


def cmd_dedup(args: argparse.Namespace, config: Config) -> int:
    root = Path(args.library or config.library_root)
    techniques = library.load_library(root)
    before = library.load_manifest(root)
    after: dict[str, int] = {}
    for tid, technique in sorted(techniques.items()):
        kept = library.canonicalize(technique.variants, args.threshold)
        library.save_technique(
            root, library.Technique(id=tid, variants=tuple(kept), family=technique.family)
        )
        after[tid] = len(kept)
    human = "\n".join(
        f"{tid:<28}{before.get(tid, 0):>4} -> {after[tid]:>4}" for tid in sorted(after)
    )
    _emit(
        args,
        {"threshold": args.threshold, "before": before, "after": after},
        human or "library is empty",
    )
    return 0


def cmd_validate(args: argparse.Namespace, config: Config) -> int:
    root = Path(args.library or config.library_root)
    techniques = library.load_library(root)
    if args.technique:
        if args.technique not in techniques:
            raise ConfigError(f"technique {args.technique!r} not in library {root}")
        selected = {args.technique: techniques[args.technique]}
    else:
        selected = techniques
    if not selected:
        raise ConfigError(f"library {root} holds no techniques")
    factory = _factory(config, args.backend)
    rng = random.Random(args.seed if args.seed is not None else config.seed)
    rows = []
    failures = 0
    for tid, technique in sorted(selected.items()):
        for index, variant in enumerate(technique.variants):
            verdict = harvest.portability_validate(factory, variant, rng=rng)
            rows.append(
                {
                    "technique_id": tid,
                    "variant_index": index,
                    "passed": verdict.passed,
                    "reason": verdict.reason,
                }
            )
            if not verdict.passed:
                failures += 1
    human = "\n".join(
        f"{row['technique_id']:<28}[{row['variant_index']}] "
        + ("pass" if row["passed"] else f"FAIL ({row['reason']})")
        for row in rows
    )
    _emit(args, {"results": rows, "failures": failures}, human)
    return 1 if failures else 0


def cmd_harvest(args: argparse.Namespace, config: Config) -> int:
    recordings_dir = Path(args.recordings)
    paths = sorted(recordings_dir.glob("*.json"))
    if not paths:
        raise ConfigError(f"no recordings (*.json) under {recordings_dir}")
    recordings = [harvest.load_recording(path) for path in paths]
    root = Path(args.library or config.library_root)
    factory = _factory(config, args.backend)
    outcome = harvest.run_harvest(
        recordings,
        root,
        factory,
        seed=args.seed if args.seed is not None else config.seed,
        threshold=args.threshold,
    )
    payload = {
        "funnel": outcome.report.to_dict(),
        "retained": outcome.retained,
        "library_root": str(root),
    }
    human = (
        outcome.report.format_table()
        + "\nretained: "
        + ", ".join(f"{tid}={k}" for tid, k in sorted(outcome.retained.items()))
    )
    _emit(args, payload, human)
    return 0


def cmd_gen_env(args: argparse.Namespace, config: Config) -> int:
    root = Path(args.library or config.library_root)
    techniques = library.load_library(root)
    ids = _parse_ids(args.ids)
    factory = _factory(config, args.backend)
    env = envgen.generate_env(
        techniques,
        ids,
        args.seed if args.seed is not None else config.seed,
        args.role,
        factory=factory,
        n_flags=len(ids),
        points=config.points,
    )
    try:
        manifest = env.manifest()
        if args.manifest_out:
            Path(args.manifest_out).write_text(
                json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
            )
        _emit(args, manifest, env.manifest_json(reveal_flags=True))
    finally:
        factory.destroy(env.sandbox)
    return 0


def _run_one_episode(
    config: Config,
    factory: SandboxFactory,
    techniques: dict[str, library.Technique],
    ids: list[str],
    seed: int,
    role: str | None,
    agent_kind: str,
    max_turns: int,
) -> tuple[envgen.MultiFlagEnv, episode.EpisodeResult]:
    env = envgen.generate_env(
        techniques, ids, seed, role, factory=factory,
        n_flags=len(ids), points=config.points,
    )
    try:
        if agent_kind == "oracle":
            agent: episode.Agent = episode.OracleAgent(env, techniques)
        elif agent_kind == "idle":
            agent = episode.ScriptedAgent([])
        else:
            raise ConfigError(f"unknown agent {agent_kind!r}")
        result = episode.run_episode(
            agent, env, max_turns, turn_cost=config.turn_cost,
            stdout_cap=config.stdout_cap,
        )
        return env, result
    finally:
        factory.destroy(env.sandbox)


def cmd_run_episode(args: argparse.Namespace, config: Config) -> int:
    root = Path(args.library or config.library_root)
    techniques = library.load_library(root)
    ids = _parse_ids(args.ids)
    factory = _factory(config, args.backend)
    env, result = _run_one_episode(
        config, factory, techniques, ids,
        args.seed if args.seed is not None else config.seed,
        args.role, args.agent, args.max_turns or config.max_turns,
    )
    if args.transcript_out:
        episode.write_transcript(Path(args.transcript_out), result)
    payload = {
        "found": sorted(result.found),
        "turns_used": result.turns_used,
        "wrong_submissions": result.wrong_submissions,
        "reward": result.reward,
        "aborted": result.aborted,
        "n_flags": len(env.planted),
    }
    human = (
        f"found {len(result.found)}/{len(env.planted)} flags in "
        f"{result.turns_used} turns, {result.wrong_submissions} wrong, "
        f"reward {result.reward}"
    )
    _emit(args, payload, human)
    return 0


def cmd_schedule_sim(args: argparse.Namespace, config: Config) -> int:
    ids = [f"t{i:03d}" for i in range(args.n_ids)]
    sched_config = scheduler.SchedulerConfig(
        pool_size=config.pool_size,
        rotation_rate=config.rotation_rate,
        batch_groups=config.batch_groups,
        n_flags=config.n_flags,
    )
    state = scheduler.init_pool(ids, args.seed, sched_config)
    rng = random.Random(args.seed)
    difficulty = {tid: rng.random() for tid in ids}
    seen = set(state.pool)
    for _ in range(args.batches):
        for _ in range(sched_config.batch_groups):
            sample = state.sample_env_techniques()
            state.record_outcomes(
                [(tid, rng.random() < difficulty[tid]) for tid in sample]
            )
        state.rotate_pool()
        seen.update(state.pool)
    if args.checkpoint:
        state.save(Path(args.checkpoint))
    coverage = len(seen) / len(ids)
    payload = {
        "batches": args.batches,
        "library_ids": len(ids),
        "ids_entered_pool": len(seen),
        "coverage": coverage,
        "final_pool": sorted(state.pool),
    }
    human = (
        f"{args.batches} batches over {len(ids)} ids: "
        f"{len(seen)} entered the pool ({coverage * 100:.1f}%)"
    )
    _emit(args, payload, human)
    return 0


def cmd_holdout(args: argparse.Namespace, config: Config) -> int:
    root = Path(args.library or config.library_root)
    techniques = library.load_library(root)
    ids = _parse_ids(args.techniques) if args.techniques else sorted(techniques)
    missing = [tid for tid in ids if tid not in techniques]
    if missing:
        raise ConfigError(f"techniques not in library: {missing}")
    factory = _factory(config, args.backend)
    base_seed = args.seed if args.seed is not None else config.seed
    results: dict[str, list[stats.TrialOutcome]] = {}
    for tid in ids:
        outcomes = []
        for trial in range(args.trials):
            _, result = _run_one_episode(
                config, factory, techniques, [tid],
                seed=base_seed * 1_000_003 + zlib.crc32(tid.encode()) + trial,
                role=None, agent_kind=args.agent,
                max_turns=args.max_turns or config.max_turns,
            )
            outcomes.append(
                stats.TrialOutcome(
                    solved=len(result.found) == 1, turns=result.turns_used
                )
            )
        results[tid] = outcomes
    report = stats.holdout_report(results)
    if args.csv_out:
        Path(args.csv_out).write_text(stats.holdout_csv(report), encoding="utf-8")
    payload = {
        "per_technique": [row.to_dict() for row in report.per_technique],
        "aggregate": report.aggregate.to_dict(),
    }
    _emit(args, payload, stats.holdout_table(report))
    return 0


# --- wiring -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flagcraft",
        description=(
            "Technique library, sandboxed multi-flag environments, episodes, "
            "and evaluation statistics."
        ),
    )
    parser.add_argument("--config", help="path to flat key-value JSON config")
    parser.add_argument("--json", action="store_true", help="machine output")
    parser.add_argument(
        "--reveal-flags", action="store_true",
        help="include flag values in stdout (redacted by default)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="Wilson interval / Fisher exact test")
    stats_sub = p.add_subparsers(dest="stat", required=True)
    w = stats_sub.add_parser("wilson")
    w.add_argument("successes", type=int)
    w.add_argument("trials", type=int)
    w.add_argument("--confidence", type=float, default=0.95)
    f = stats_sub.add_parser("fisher")
    for cell in "abcd":
        f.add_argument(cell, type=int)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("funnel", help="stage-survival accounting table")
    p.add_argument("--counts", required=True,
                   help="raw,explored,verified,synthesized,portable[,deduped]")
    p.add_argument("--deduped", type=int)
    p.set_defaults(func=cmd_funnel)

    p = sub.add_parser("dedup", help="re-canonicalize every technique in place")
    p.add_argument("--library")
    p.add_argument("--threshold", type=float, default=library.DEFAULT_DEDUP_THRESHOLD)
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("validate", help="bidirectional-contract validation")
    p.add_argument("--library")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--technique")
    group.add_argument("--all", action="store_true")
    p.add_argument("--backend")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("harvest", help="replay recordings through stages 1-5")
    p.add_argument("--recordings", required=True)
    p.add_argument("--library")
    p.add_argument("--backend")
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float, default=library.DEFAULT_DEDUP_THRESHOLD)
    p.set_defaults(func=cmd_harvest)

    p = sub.add_parser("gen-env", help="provision a multi-flag environment")
    p.add_argument("--library")
    p.add_argument("--ids", required=True, help="comma-separated technique ids")
    p.add_argument("--seed", type=int)
    p.add_argument("--role", choices=(*ROLE_NAMES, "none"), default=None)
    p.add_argument("--backend")
    p.add_argument("--manifest-out")
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("run-episode", help="generate an env and run an agent")
    p.add_argument("--library")
    p.add_argument("--ids", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--role", choices=(*ROLE_NAMES, "none"), default=None)
    p.add_argument("--agent", choices=("oracle", "idle"), default="oracle")
    p.add_argument("--max-turns", type=int)
    p.add_argument("--backend")
    p.add_argument("--transcript-out")
    p.set_defaults(func=cmd_run_episode)

    p = sub.add_parser("schedule-sim", help="simulate sticky-pool batches")
    p.add_argument("--n-ids", type=int, default=155)
    p.add_argument("--batches", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_schedule_sim)

    p = sub.add_parser("holdout", help="per-technique solve-rate evaluation")
    p.add_argument("--library")
    p.add_argument("--techniques", help="comma-separated ids (default: all)")
    p.add_argument("--trials", type=int, default=15)
    p.add_argument("--agent", choices=("oracle", "idle"), default="oracle")
    p.add_argument("--max-turns", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--backend")
    p.add_argument("--csv-out")
    p.set_defaults(func=cmd_holdout)

    return parser


def _cleanup(signum: int, frame: object) -> None:
    for factory in _ACTIVE_FACTORIES:
        factory.destroy_all()
    sys.exit(130)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        signal.signal(signal.SIGINT, _cleanup)
        signal.signal(signal.SIGTERM, _cleanup)
    except ValueError:
        pass  # not on the main thread (tests)
    try:
        config = load_config(args.config)
        return args.func(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FlagcraftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        for factory in _ACTIVE_FACTORIES:
            factory.destroy_all()
        _ACTIVE_FACTORIES.clear()


if __name__ == "__main__":
    sys.exit(main())
