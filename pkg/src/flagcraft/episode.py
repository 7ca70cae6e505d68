"""Turn-based episode harness and reward.

An agent alternates bash commands and flag submissions against a live
multi-flag environment under a turn budget. Reward is
``points_earned - turn_cost * turns_used - wrong_submissions`` and is never
clipped at zero. Both action kinds consume one turn; resubmitting an
already-found flag is a no-op (neither reward nor penalty).
"""

from __future__ import annotations

import json
import shlex
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

from .envgen import MultiFlagEnv
from .flags import find_flag
from .library import Technique

DEFAULT_MAX_TURNS = 18
DEFAULT_TURN_COST = 1
DEFAULT_STDOUT_CAP = 8192


@dataclass(frozen=True)
class BashAction:
    command: str


@dataclass(frozen=True)
class SubmitAction:
    value: str


AgentAction = BashAction | SubmitAction


@dataclass(frozen=True)
class Observation:
    kind: str  # "bash" | "submit"
    exit_code: int | None = None
    stdout: str = ""
    stderr: str = ""
    outcome: str | None = None  # "correct" | "incorrect" | "duplicate"


@dataclass(frozen=True)
class TurnRecord:
    index: int
    action: AgentAction
    observation: Observation


class Agent(Protocol):
    def act(self, history: tuple[TurnRecord, ...]) -> AgentAction | None:
        """Next action, or None to stop the episode gracefully."""


@dataclass
class EpisodeResult:
    found: frozenset[int]
    turns_used: int
    wrong_submissions: int
    reward: int
    transcript: tuple[TurnRecord, ...]
    aborted: bool = False


def score(
    result: EpisodeResult, env: MultiFlagEnv, *, turn_cost: int = DEFAULT_TURN_COST
) -> int:
    """points over found flags, minus turn cost, minus wrong submissions."""
    points = sum(env.planted[i].points for i in result.found)
    return points - turn_cost * result.turns_used - result.wrong_submissions


def run_episode(
    agent: Agent,
    env: MultiFlagEnv,
    max_turns: int = DEFAULT_MAX_TURNS,
    *,
    turn_cost: int = DEFAULT_TURN_COST,
    stdout_cap: int = DEFAULT_STDOUT_CAP,
) -> EpisodeResult:
    """Run the turn loop until all flags are found, the budget is spent, or
    the agent stops. An agent exception aborts with a partial result."""
    sb = env.sandbox
    flag_index = {p.flag: i for i, p in enumerate(env.planted)}
    found: set[int] = set()
    wrong = 0
    transcript: list[TurnRecord] = []
    aborted = False

    for turn in range(max_turns):
        try:
            action = agent.act(tuple(transcript))
        except Exception:
            aborted = True
            break
        if action is None:
            break
        if isinstance(action, BashAction):
            result = sb.exec_script(action.command or "true")
            observation = Observation(
                kind="bash",
                exit_code=result.exit_code,
                stdout=result.stdout_text[:stdout_cap],
                stderr=result.stderr_text[:stdout_cap],
            )
        else:
            submitted = action.value.rstrip()
            index = flag_index.get(submitted)
            if index is None:
                wrong += 1
                outcome = "incorrect"
            elif index in found:
                outcome = "duplicate"
            else:
                found.add(index)
                outcome = "correct"
            observation = Observation(kind="submit", outcome=outcome)
        transcript.append(TurnRecord(turn, action, observation))
        if len(found) == len(env.planted):
            break

    result = EpisodeResult(
        found=frozenset(found),
        turns_used=len(transcript),
        wrong_submissions=wrong,
        reward=0,
        transcript=tuple(transcript),
        aborted=aborted,
    )
    result.reward = score(result, env, turn_cost=turn_cost)
    return result


def episode_outcomes(env: MultiFlagEnv, result: EpisodeResult) -> list[tuple[str, bool]]:
    """(technique_id, solved) per planted instance, for scheduler accounting."""
    return [
        (planted.technique_id, i in result.found)
        for i, planted in enumerate(env.planted)
    ]


class ScriptedAgent:
    """Replays a fixed action list, then stops."""

    def __init__(self, actions: Sequence[AgentAction]) -> None:
        self._actions = list(actions)
        self._next = 0

    def act(self, history: tuple[TurnRecord, ...]) -> AgentAction | None:
        if self._next >= len(self._actions):
            return None
        action = self._actions[self._next]
        self._next += 1
        return action


class OracleAgent:
    """Upper-bound baseline: runs each planted technique's recovery script,
    then submits whatever flag the output contains. Two turns per flag."""

    def __init__(self, env: MultiFlagEnv, library: Mapping[str, Technique]) -> None:
        self._commands: list[str] = []
        for planted in env.planted:
            variant = library[planted.technique_id].variants[planted.variant_index]
            physical = env.sandbox.map_path(planted.target_dir)
            self._commands.append(
                f"cd {shlex.quote(physical)}\nset -- {shlex.quote(physical)}\n"
                + variant.recovery_script
            )
        self._next = 0
        self._pending_submit = False

    def act(self, history: tuple[TurnRecord, ...]) -> AgentAction | None:
        if self._pending_submit:
            self._pending_submit = False
            last = history[-1].observation
            flag = find_flag(last.stdout)
            return SubmitAction(flag if flag is not None else last.stdout.strip())
        if self._next >= len(self._commands):
            return None
        command = self._commands[self._next]
        self._next += 1
        self._pending_submit = True
        return BashAction(command)


# --- transcript serialization (also consumed by replay tooling) -------------

def _action_to_dict(action: AgentAction) -> dict[str, Any]:
    if isinstance(action, BashAction):
        return {"kind": "bash", "command": action.command}
    return {"kind": "submit_flag", "value": action.value}


def _action_from_dict(data: Mapping[str, Any]) -> AgentAction:
    if data["kind"] == "bash":
        return BashAction(data["command"])
    return SubmitAction(data["value"])


def write_transcript(path: Path, result: EpisodeResult) -> None:
    """One JSON object per turn, LF-terminated."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in result.transcript:
            fh.write(
                json.dumps(
                    {
                        "turn": record.index,
                        "action": _action_to_dict(record.action),
                        "observation": {
                            "kind": record.observation.kind,
                            "exit_code": record.observation.exit_code,
                            "stdout": record.observation.stdout,
                            "stderr": record.observation.stderr,
                            "outcome": record.observation.outcome,
                        },
                    }
                )
                + "\n"
            )


def read_transcript(path: Path) -> list[TurnRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            data = json.loads(line)
            obs = data["observation"]
            records.append(
                TurnRecord(
                    index=data["turn"],
                    action=_action_from_dict(data["action"]),
                    observation=Observation(
                        kind=obs["kind"],
                        exit_code=obs.get("exit_code"),
                        stdout=obs.get("stdout", ""),
                        stderr=obs.get("stderr", ""),
                        outcome=obs.get("outcome"),
                    ),
                )
            )
    return records


def reward_from_transcript(
    transcript: Sequence[TurnRecord],
    env: MultiFlagEnv,
    *,
    turn_cost: int = DEFAULT_TURN_COST,
) -> int:
    """Recompute the reward from a transcript alone (decomposition check)."""
    flag_points = {p.flag: p.points for p in env.planted}
    earned = 0
    wrong = 0
    for record in transcript:
        if record.observation.kind != "submit":
            continue
        if record.observation.outcome == "correct":
            assert isinstance(record.action, SubmitAction)
            earned += flag_points[record.action.value.rstrip()]
        elif record.observation.outcome == "incorrect":
            wrong += 1
    return earned - turn_cost * len(transcript) - wrong
