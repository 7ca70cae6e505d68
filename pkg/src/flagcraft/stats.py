"""Evaluation statistics: Wilson intervals, Fisher's exact test, holdout tables."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from statistics import NormalDist
from typing import Any, Mapping, Sequence

DEFAULT_CONFIDENCE = 0.95


def wilson_interval(
    successes: int, trials: int, confidence: float = DEFAULT_CONFIDENCE
) -> tuple[float, float]:
    """Wilson score interval with the two-sided normal quantile.

    At 95% the quantile is z = 1.959964. Boundary cases are exact: zero
    successes give low == 0.0, all successes give high == 1.0.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 0 <= successes <= trials:
        raise ValueError("successes must be in [0, trials]")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must be in (0, 1)")
    z = NormalDist().inv_cdf((1.0 + confidence) / 2.0)
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2.0 * trials)) / denom
    half = (
        z
        * math.sqrt(p * (1.0 - p) / trials + z * z / (4.0 * trials * trials))
        / denom
    )
    low = 0.0 if successes == 0 else max(0.0, center - half)
    high = 1.0 if successes == trials else min(1.0, center + half)
    return low, high


def fisher_exact_two_sided(
    a_success: int, a_fail: int, b_success: int, b_fail: int
) -> float:
    """Exact two-sided Fisher p: sum of hypergeometric probabilities of all
    same-margin tables no more likely than the observed one.

    Computed in exact rational arithmetic, so small-table results agree
    bit-for-bit with brute-force enumeration. Degenerate margins give 1.0.
    """
    if min(a_success, a_fail, b_success, b_fail) < 0:
        raise ValueError("cell counts must be non-negative")
    row_a = a_success + a_fail
    row_b = b_success + b_fail
    col_success = a_success + b_success
    n = row_a + row_b
    if row_a == 0 or row_b == 0 or col_success == 0 or col_success == n:
        return 1.0

    denom = math.comb(n, col_success)

    def prob(x: int) -> Fraction:
        return Fraction(math.comb(row_a, x) * math.comb(row_b, col_success - x), denom)

    observed = prob(a_success)
    low = max(0, col_success - row_b)
    high = min(col_success, row_a)
    total = sum(
        (p for x in range(low, high + 1) if (p := prob(x)) <= observed),
        start=Fraction(0),
    )
    return float(min(total, Fraction(1)))


@dataclass(frozen=True)
class SolveStats:
    technique_id: str
    successes: int
    trials: int
    rate: float
    wilson_low: float
    wilson_high: float
    mean_turns_to_solve: float | None

    def to_dict(self) -> dict[str, Any]:
        return {
            "technique_id": self.technique_id,
            "successes": self.successes,
            "trials": self.trials,
            "rate": self.rate,
            "wilson_low": self.wilson_low,
            "wilson_high": self.wilson_high,
            "mean_turns_to_solve": self.mean_turns_to_solve,
        }


@dataclass(frozen=True)
class TrialOutcome:
    solved: bool
    turns: int


@dataclass(frozen=True)
class HoldoutReport:
    per_technique: tuple[SolveStats, ...]
    aggregate: SolveStats


def _solve_stats(
    technique_id: str,
    outcomes: Sequence[TrialOutcome],
    confidence: float,
) -> SolveStats:
    trials = len(outcomes)
    successes = sum(1 for o in outcomes if o.solved)
    low, high = wilson_interval(successes, trials, confidence)
    solved_turns = [o.turns for o in outcomes if o.solved]
    return SolveStats(
        technique_id=technique_id,
        successes=successes,
        trials=trials,
        rate=successes / trials,
        wilson_low=low,
        wilson_high=high,
        mean_turns_to_solve=(
            sum(solved_turns) / len(solved_turns) if solved_turns else None
        ),
    )


def holdout_report(
    results: Mapping[str, Sequence[TrialOutcome]],
    confidence: float = DEFAULT_CONFIDENCE,
) -> HoldoutReport:
    """Per-technique solve statistics plus a pooled aggregate row."""
    per_technique = tuple(
        _solve_stats(tid, results[tid], confidence) for tid in sorted(results)
    )
    pooled = [o for tid in sorted(results) for o in results[tid]]
    return HoldoutReport(
        per_technique=per_technique,
        aggregate=_solve_stats("aggregate", pooled, confidence),
    )


CSV_COLUMNS = (
    "technique_id",
    "successes",
    "trials",
    "rate",
    "wilson_low",
    "wilson_high",
    "mean_turns_to_solve",
)


def holdout_csv(report: HoldoutReport) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for row in (*report.per_technique, report.aggregate):
        mean_turns = "" if row.mean_turns_to_solve is None else f"{row.mean_turns_to_solve:.2f}"
        lines.append(
            f"{row.technique_id},{row.successes},{row.trials},"
            f"{row.rate:.4f},{row.wilson_low:.4f},{row.wilson_high:.4f},{mean_turns}"
        )
    return "\n".join(lines) + "\n"


def holdout_table(report: HoldoutReport) -> str:
    header = (
        f"{'technique':<24}{'solved':>8}{'trials':>8}{'rate':>8}"
        f"{'wilson 95% CI':>20}{'mean turns':>12}"
    )
    lines = [header]
    for row in (*report.per_technique, report.aggregate):
        ci = f"[{row.wilson_low * 100:.1f}%, {row.wilson_high * 100:.1f}%]"
        mean_turns = "-" if row.mean_turns_to_solve is None else f"{row.mean_turns_to_solve:.1f}"
        lines.append(
            f"{row.technique_id:<24}{row.successes:>8}{row.trials:>8}"
            f"{row.rate * 100:>7.1f}%{ci:>20}{mean_turns:>12}"
        )
    return "\n".join(lines)
