"""Sticky-pool scheduling.

A rotating pool of techniques feeds the environment generator. Each batch
samples uniformly from the pool; after the batch, the highest per-batch
solve-rate members graduate out (plus one guaranteed random removal for
exploration) and the pool refills from outside ids, preferring the fewest
lifetime attempts. Lifetime statistics persist across rotations; per-batch
counters reset.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError, SchedulerError

DEFAULT_POOL_SIZE = 50
DEFAULT_ROTATION_RATE = 0.3
DEFAULT_BATCH_GROUPS = 8
DEFAULT_N_FLAGS = 8


@dataclass
class TechniqueStats:
    attempts: int = 0
    solves: int = 0


@dataclass(frozen=True)
class SchedulerConfig:
    pool_size: int = DEFAULT_POOL_SIZE
    rotation_rate: float = DEFAULT_ROTATION_RATE
    batch_groups: int = DEFAULT_BATCH_GROUPS
    n_flags: int = DEFAULT_N_FLAGS
    random_removals: int = 1  # guaranteed exploration removals per rotation

    def __post_init__(self) -> None:
        if self.pool_size <= 0 or self.batch_groups <= 0 or self.n_flags <= 0:
            raise ConfigError("scheduler counts must be positive")
        if self.n_flags > self.pool_size:
            raise ConfigError("n_flags cannot exceed pool_size")
        removals = self.rotation_rate * self.pool_size
        if abs(removals - round(removals)) > 1e-9 or round(removals) < 1:
            raise ConfigError(
                "rotation_rate x pool_size must be a positive integer, got "
                f"{removals}"
            )
        if not 0 <= self.random_removals <= round(removals):
            raise ConfigError(
                "random_removals must be between 0 and the rotation total"
            )

    @property
    def removals_per_rotation(self) -> int:
        return round(self.rotation_rate * self.pool_size)

    def to_dict(self) -> dict[str, Any]:
        return {
            "pool_size": self.pool_size,
            "rotation_rate": self.rotation_rate,
            "batch_groups": self.batch_groups,
            "n_flags": self.n_flags,
            "random_removals": self.random_removals,
        }


@dataclass(frozen=True)
class RotationRecord:
    removed: tuple[str, ...]
    added: tuple[str, ...]


@dataclass
class PoolState:
    """Pool membership plus per-technique lifetime and per-batch counters."""

    pool: list[str]
    lifetime: dict[str, TechniqueStats]
    batch: dict[str, TechniqueStats]
    rng: random.Random
    config: SchedulerConfig
    all_ids: tuple[str, ...] = field(default=())

    def sample_env_techniques(self) -> list[str]:
        """Uniform sample of n_flags pool members without replacement."""
        return self.rng.sample(self.pool, self.config.n_flags)

    def record_outcomes(self, outcomes: Iterable[tuple[str, bool]]) -> None:
        """One attempt per planted instance; one solve per recovered flag."""
        pool = set(self.pool)
        for technique_id, solved in outcomes:
            if technique_id not in pool:
                raise SchedulerError(
                    f"outcome for id {technique_id!r} not in the current pool"
                )
            for window in (self.lifetime[technique_id], self.batch[technique_id]):
                window.attempts += 1
                if solved:
                    window.solves += 1

    def _batch_rate(self, technique_id: str) -> float:
        stats = self.batch[technique_id]
        return stats.solves / stats.attempts if stats.attempts else 0.0

    def rotate_pool(self) -> RotationRecord:
        """Drop top-by-rate members plus one random; refill least-attempted.

        Rate ties break toward higher batch attempts, then lexicographic id.
        With fewer outside candidates than removals, the least-attempted
        removed ids are recycled so the pool size invariant always holds.
        """
        total_removals = self.config.removals_per_rotation
        by_rate = sorted(
            self.pool,
            key=lambda tid: (
                -self._batch_rate(tid),
                -self.batch[tid].attempts,
                tid,
            ),
        )
        top = by_rate[: max(total_removals - self.config.random_removals, 0)]
        remainder = [tid for tid in self.pool if tid not in set(top)]
        random_removals = (
            self.rng.sample(remainder, min(self.config.random_removals, len(remainder)))
            if remainder
            else []
        )
        removals = set(top) | set(random_removals)

        outside = sorted(set(self.all_ids) - set(self.pool))
        self.rng.shuffle(outside)
        outside.sort(key=lambda tid: self.lifetime[tid].attempts)  # stable: seeded ties
        additions = outside[:total_removals]
        shortfall = total_removals - len(additions)
        if shortfall > 0:
            recycled = sorted(removals, key=lambda tid: (self.lifetime[tid].attempts, tid))
            removals -= set(recycled[:shortfall])

        old_pool = list(self.pool)
        self.pool = [tid for tid in old_pool if tid not in removals] + additions
        for stats in self.batch.values():
            stats.attempts = 0
            stats.solves = 0
        return RotationRecord(
            removed=tuple(sorted(set(old_pool) - set(self.pool))),
            added=tuple(sorted(set(self.pool) - set(old_pool))),
        )

    # --- checkpointing -------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        state = self.rng.getstate()
        return {
            "pool": list(self.pool),
            "stats": {
                tid: {
                    "attempts": self.lifetime[tid].attempts,
                    "solves": self.lifetime[tid].solves,
                    "batch_attempts": self.batch[tid].attempts,
                    "batch_solves": self.batch[tid].solves,
                }
                for tid in self.all_ids
            },
            "rng_state": [state[0], list(state[1]), state[2]],
            "config": self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PoolState":
        rng = random.Random()
        version, internal, gauss = data["rng_state"]
        rng.setstate((version, tuple(internal), gauss))
        stats = data["stats"]
        return cls(
            pool=list(data["pool"]),
            lifetime={
                tid: TechniqueStats(rec["attempts"], rec["solves"])
                for tid, rec in stats.items()
            },
            batch={
                tid: TechniqueStats(rec["batch_attempts"], rec["batch_solves"])
                for tid, rec in stats.items()
            },
            rng=rng,
            config=SchedulerConfig(**data["config"]),
            all_ids=tuple(stats.keys()),
        )

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "PoolState":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def init_pool(
    library_ids: Iterable[str],
    seed: int,
    config: SchedulerConfig | None = None,
) -> PoolState:
    """Seeded uniform sample of pool_size ids; all statistics zeroed."""
    config = config or SchedulerConfig()
    ids = sorted(library_ids)
    if len(ids) < config.pool_size:
        raise ConfigError(
            f"need at least pool_size={config.pool_size} ids, got {len(ids)}"
        )
    rng = random.Random(seed)
    pool = rng.sample(ids, config.pool_size)
    return PoolState(
        pool=pool,
        lifetime={tid: TechniqueStats() for tid in ids},
        batch={tid: TechniqueStats() for tid in ids},
        rng=rng,
        config=config,
        all_ids=tuple(ids),
    )
